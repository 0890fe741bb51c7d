#pragma once

// The six estimators compared in the simulation study, run on one dataset.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "fedsurv/eif/influence.hpp"
#include "fedsurv/fedopt/aggregate.hpp"
#include "fedsurv/nuisance/bundle.hpp"

namespace fedsurv {

enum class Method { TGT, POOL, IVW, FED, FED_BOOT, CCOD };

inline constexpr std::array<Method, 6> kAllMethods{Method::TGT, Method::POOL, Method::IVW,
                                                   Method::FED, Method::FED_BOOT, Method::CCOD};

inline std::string to_string(Method m) {
  switch (m) {
    case Method::TGT: return "TGT";
    case Method::POOL: return "POOL";
    case Method::IVW: return "IVW";
    case Method::FED: return "FED";
    case Method::FED_BOOT: return "FED-BOOT";
    case Method::CCOD: return "CCOD";
  }
  return "?";
}

inline Method method_from_string(std::string_view s) {
  for (Method m : kAllMethods)
    if (s == to_string(m)) return m;
  fail(ErrorKind::InvalidInput, "unknown method '" + std::string(s) + "'");
}

struct EstimationConfig {
  std::size_t folds = 5;  // cross-fitting folds M
  double eta_cap = 20.0;
  Sharing sharing = Sharing::CoarseOnly;
  EnsembleOptions ensemble;
  FedConfig fed = [] {
    FedConfig c;
    c.bootstrap = 200;
    return c;
  }();
};

/// Pointwise estimates of one method on the whole grid, per arm.
using MethodCurve = std::array<std::vector<EstimateWithCI>, 2>;

struct CompetitorResult {
  TimeGrid grid;
  std::map<Method, MethodCurve> curves;
  std::map<Method, std::string> errors;       // methods that failed on this dataset
  std::optional<FedResult> fed;               // weights and diagnostics
  std::size_t num_sites = 0;

  const EstimateWithCI& at(Method m, double t, int a) const {
    return curves.at(m)[static_cast<std::size_t>(a)][grid.index_of(t)];
  }
};

/// Inverse-variance combination of per-site estimates; zero-variance inputs dominate.
inline EstimateWithCI ivw_combine(const std::vector<EstimateWithCI>& sites) {
  require(!sites.empty(), ErrorKind::InvalidInput, "no site estimates to combine");
  std::size_t n = 0;
  std::vector<double> w;
  for (const auto& s : sites) n += s.n_effective;
  bool exact = false;
  for (const auto& s : sites) exact = exact || !(s.se > 0.0);
  if (exact) {
    double sum = 0.0, cnt = 0.0;
    for (const auto& s : sites)
      if (!(s.se > 0.0)) sum += s.theta, cnt += 1.0;
    return wald_interval(sum / cnt, 0.0, n);
  }
  double wsum = 0.0, est = 0.0;
  for (const auto& s : sites) {
    const double wi = 1.0 / (s.se * s.se);
    wsum += wi;
    est += wi * s.theta;
  }
  return wald_interval(est / wsum, std::sqrt(1.0 / wsum), n);
}

inline MethodCurve estimator_curve(const InfluenceTable& table, const EstimatorId& e) {
  MethodCurve out;
  for (int a = 0; a < 2; ++a)
    for (double t : table.grid().points()) out[static_cast<std::size_t>(a)].push_back(estimator_variance(table, e, t, a));
  return out;
}

inline CompetitorResult run_competitors(const Dataset& data, const TimeGrid& grid, const EstimationConfig& cfg,
                                        std::uint64_t seed) {
  CompetitorResult res;
  res.grid = grid;
  const int K = num_sites(data);
  res.num_sites = static_cast<std::size_t>(K);
  const auto folds = make_folds(data, cfg.folds, seed);
  BundleOptions opt;
  opt.sharing = cfg.sharing;
  opt.eta_cap = cfg.eta_cap;
  opt.ensemble = cfg.ensemble;
  const auto bundle = build_nuisance_bundle(data, folds, grid, true, true, opt, seed);
  const auto table = build_influence_table(data, bundle);

  auto guarded = [&](Method m, auto&& fn) {
    try {
      res.curves[m] = fn();
    } catch (const Error& e) {
      res.errors[m] = e.what();
    }
  };
  guarded(Method::TGT, [&] { return estimator_curve(table, {EstimatorKind::TGT, 0}); });
  guarded(Method::POOL, [&] { return estimator_curve(table, {EstimatorKind::POOL, 0}); });
  guarded(Method::CCOD, [&] { return estimator_curve(table, {EstimatorKind::CCOD, 0}); });
  guarded(Method::IVW, [&] {
    MethodCurve out;
    for (int a = 0; a < 2; ++a)
      for (double t : grid.points()) {
        std::vector<EstimateWithCI> sites;
        for (int k = 0; k < K; ++k) sites.push_back(estimator_variance(table, {EstimatorKind::OWN, k}, t, a));
        out[static_cast<std::size_t>(a)].push_back(ivw_combine(sites));
      }
    return out;
  });
  try {
    auto fed_cfg = cfg.fed;
    fed_cfg.seed = seed;
    res.fed = fed_curves(table, K, fed_cfg);
    res.curves[Method::FED] = res.fed->fed.corrected;
    if (res.fed->boot) res.curves[Method::FED_BOOT] = res.fed->boot->corrected;
    else res.errors[Method::FED_BOOT] = "bootstrap disabled";
  } catch (const Error& e) {
    res.errors[Method::FED] = res.errors[Method::FED_BOOT] = e.what();
  }
  return res;
}

}  // namespace fedsurv
