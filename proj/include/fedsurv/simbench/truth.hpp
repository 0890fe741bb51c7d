#pragma once

// Large-sample truth for the target-site potential survival curves.

#include <algorithm>
#include <cmath>
#include <vector>

#include "fedsurv/simbench/dgp.hpp"
#include "fedsurv/survcore/types.hpp"

namespace fedsurv {

struct TruthCurve {
  StepCurve curve;
  std::vector<double> se;  // binomial Monte Carlo standard error per grid point
  std::size_t n_super = 0;
};

/// Empirical survival of n_super uncensored potential event times T(a) drawn from the
/// target-site population.
inline TruthCurve truth_oracle(const ScenarioSpec& spec, const TimeGrid& grid, int a, std::size_t n_super,
                               std::uint64_t seed) {
  require(n_super >= 100000, ErrorKind::InvalidInput, "truth oracle needs at least 1e5 draws");
  require(a == 0 || a == 1, ErrorKind::InvalidInput, "arm must be 0 or 1");
  const auto knobs = spec.knobs(0);
  auto eng = make_engine(seed, "truth", {static_cast<std::uint64_t>(a)});
  std::vector<double> times(n_super);
  for (auto& t : times) {
    const auto x = dgp::draw_covariates(eng, knobs);
    t = dgp::weibull_time(dgp::uniform_open(eng), dgp::event_log_hazard(x, a, knobs));
  }
  std::sort(times.begin(), times.end());
  TruthCurve out;
  out.n_super = n_super;
  out.curve.grid = grid;
  out.curve.kind = CurveKind::Survival;
  const double n = static_cast<double>(n_super);
  for (double t : grid.points()) {
    const auto above = static_cast<double>(times.end() - std::upper_bound(times.begin(), times.end(), t));
    const double s = t <= 0.0 ? 1.0 : above / n;
    out.curve.values.push_back(s);
    out.se.push_back(std::sqrt(s * (1.0 - s) / n));
  }
  return out;
}

}  // namespace fedsurv
