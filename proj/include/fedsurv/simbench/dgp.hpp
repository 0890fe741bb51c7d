#pragma once

// Three-covariate simulation design with site-specific shifts in covariates,
// event hazards and censoring hazards.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fedsurv/rng.hpp"
#include "fedsurv/survcore/types.hpp"

namespace fedsurv {

enum class Scenario { Homogeneous, CovariateShift, OutcomeShift, CensoringShift, AllShift };

inline std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::Homogeneous: return "homogeneous";
    case Scenario::CovariateShift: return "covariate_shift";
    case Scenario::OutcomeShift: return "outcome_shift";
    case Scenario::CensoringShift: return "censoring_shift";
    case Scenario::AllShift: return "all_shift";
  }
  return "?";
}

inline Scenario scenario_from_string(std::string_view s) {
  for (auto sc : {Scenario::Homogeneous, Scenario::CovariateShift, Scenario::OutcomeShift, Scenario::CensoringShift,
                  Scenario::AllShift})
    if (s == to_string(sc)) return sc;
  fail(ErrorKind::InvalidInput, "unknown scenario '" + std::string(s) + "'");
}

/// Site-level shift knobs.
struct SiteKnobs {
  double gamma = 0.0;    // covariate shift
  double d_t = 0.0;      // event-hazard trend
  double d_c = 0.0;      // censoring-hazard trend
  double delta_t = 0.0;  // event-hazard treatment effect
  double delta_c = 0.0;  // censoring-hazard treatment effect
};

struct ScenarioSpec {
  Scenario scenario = Scenario::Homogeneous;
  int K = 5;
  std::size_t n0 = 300;
  std::size_t n_source = 600;

  SiteKnobs knobs(int k) const {
    const double v = static_cast<double>(k);
    switch (scenario) {
      case Scenario::Homogeneous: return {};
      case Scenario::CovariateShift: return {v, 0, 0, 0, 0};
      case Scenario::OutcomeShift: return {0, v, 0, v, 0};
      case Scenario::CensoringShift: return {0, 0, v, 0, v};
      case Scenario::AllShift: return {v, v, v, v, v};
    }
    return {};
  }
  std::size_t site_size(int k) const { return k == 0 ? n0 : n_source; }
};

namespace dgp {

inline constexpr double kWeibullShape = 1.2;
inline constexpr double kWeibullScale = 0.6;
inline constexpr double kCensorCap = 200.0;

inline double beta_draw(Engine& eng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(eng);
  const double y = gb(eng);
  return x / (x + y);
}

/// Shape parameters of the three Beta draws; X2 and X3 shapes depend on X1.
inline std::array<double, 2> x1_shape(const SiteKnobs& k) { return {1.1 - 0.05 * k.gamma, 1.1 + 0.2 * k.gamma}; }
inline std::array<double, 2> x2_shape(const SiteKnobs& k, double x1) {
  return {1.5 + (x1 + 0.5 * k.gamma) / 20.0, 4.0 + 2.0 * k.gamma};
}
inline std::array<double, 2> x3_shape(const SiteKnobs& k, double x1) {
  return {1.5 + std::abs(x1 - 50.0 + 3.0 * k.gamma) / 20.0, 3.0 + 0.1 * k.gamma};
}

inline std::vector<double> draw_covariates(Engine& eng, const SiteKnobs& k) {
  const auto s1 = x1_shape(k);
  const double x1 = 33.0 * beta_draw(eng, s1[0], s1[1]) + 9.0 + 2.0 * k.gamma;
  const auto s2 = x2_shape(k, x1);
  const double x2 = 52.0 * beta_draw(eng, s2[0], s2[1]) + 7.0 + 2.0 * k.gamma;
  const auto s3 = x3_shape(k, x1);
  const double x3 = (4.0 + 2.0 * k.gamma) * beta_draw(eng, s3[0], s3[1]);
  return {x1, x2, x3};
}

inline double propensity(std::span<const double> x) {
  const double z =
      -1.05 + std::log(1.3 + std::exp(-12.0 + x[0] / 10.0) + std::exp(-2.0 + x[1] / 12.0) + std::exp(-2.0 + x[2] / 3.0));
  return 1.0 / (1.0 + std::exp(-z));
}

inline double event_log_hazard(std::span<const double> x, int a, const SiteKnobs& k) {
  return -5.02 + 0.1 * (x[0] - 25.0) - 0.1 * (x[1] - 25.0) + 0.05 * (x[2] - 2.0) + k.d_t * 0.1 * (x[1] - 25.0) +
         a * k.delta_t * 0.1 * (x[0] + x[1] + x[2] - 50.0);
}

inline double censoring_log_hazard(std::span<const double> x, int a, const SiteKnobs& k) {
  return -4.87 + 0.01 * (x[0] - 25.0) - 0.02 * (x[1] - 25.0) + 0.01 * (x[2] - 2.0) - k.d_c * 0.1 * (x[1] - 25.0) +
         a * k.delta_c * 0.1 * (x[0] + x[1] + x[2] - 50.0);
}

/// Inverse-transform Weibull draw for log hazard h.
inline double weibull_time(double u, double h) {
  return std::pow(-std::log(u) / (std::exp(h) * kWeibullScale), 1.0 / kWeibullShape);
}

/// P(T > t) for log hazard h.
inline double weibull_survival(double t, double h) {
  return std::exp(-std::exp(h) * kWeibullScale * std::pow(t, kWeibullShape));
}

/// P(C > t) including the administrative cap.
inline double censoring_survival(double t, double h) { return t >= kCensorCap ? 0.0 : weibull_survival(t, h); }

inline double uniform_open(Engine& eng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double v = u(eng);
  while (v <= 0.0) v = u(eng);
  return v;
}

}  // namespace dgp

/// n_k observations of site k.
inline Dataset gen_site(int k, std::size_t n_k, const ScenarioSpec& spec, std::uint64_t seed) {
  const auto knobs = spec.knobs(k);
  auto eng = make_engine(seed, "gen_site", {static_cast<std::uint64_t>(k)});
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Dataset out;
  out.reserve(n_k);
  for (std::size_t i = 0; i < n_k; ++i) {
    Observation o;
    o.x = dgp::draw_covariates(eng, knobs);
    o.a = unif(eng) < dgp::propensity(o.x) ? 1 : 0;
    const double t = dgp::weibull_time(dgp::uniform_open(eng), dgp::event_log_hazard(o.x, o.a, knobs));
    const double c = std::min(dgp::weibull_time(dgp::uniform_open(eng), dgp::censoring_log_hazard(o.x, o.a, knobs)),
                              dgp::kCensorCap);
    o.y = std::min(t, c);
    o.delta = t <= c ? 1 : 0;
    o.r = k;
    out.push_back(std::move(o));
  }
  return out;
}

/// All K sites of a scenario, target first.
inline Dataset gen_dataset(const ScenarioSpec& spec, std::uint64_t seed) {
  Dataset all;
  for (int k = 0; k < spec.K; ++k) {
    auto site = gen_site(k, spec.site_size(k), spec, seed);
    all.insert(all.end(), site.begin(), site.end());
  }
  return all;
}

}  // namespace fedsurv
