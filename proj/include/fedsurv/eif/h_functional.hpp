#pragma once

// Weighted martingale residual
//   H(t) = I(Y <= t, D = 1) / (S(Y) G(Y-)) - sum_{u <= t ^ Y} dLambda(u) / (S(u) G(u-))
// on a grid, with S(u) the post-jump value and G(u-) the left limit. The
// observed time Y is mapped to the first grid point at or after it.

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedsurv/survcore/types.hpp"

namespace fedsurv {

/// Grid cell of an observed time: first grid index with point >= y, at least 1.
inline std::size_t observed_index(const TimeGrid& grid, double y) { return std::max<std::size_t>(1, grid.ceil_index(y)); }

/// Fills `out[g]` = H(t_g) for every grid index. `s` and `g` are survival values on
/// the grid; the hazard increments are those of the product integral of `s`
/// unless `dlambda` is given. Returns the number of survival values floored.
inline std::size_t h_curve(std::size_t yidx, int delta, std::span<const double> s, std::span<const double> g,
                           std::span<double> out, std::span<const double> dlambda = {}) {
  const std::size_t n = s.size();
  std::size_t floors = 0;
  auto floor = [&](double v) {
    if (v < kSurvivalFloor) {
      ++floors;
      return kSurvivalFloor;
    }
    return v;
  };
  const std::size_t stop = std::min(yidx, n - 1);
  double j = 0.0, prev = 1.0;
  double g_left = 1.0;
  for (std::size_t u = 0; u <= stop; ++u) {
    const double su = floor(s[u]);
    const double dl = dlambda.empty() ? 1.0 - s[u] / prev : dlambda[u];
    if (g_left <= 0.0) fail(ErrorKind::PositivityViolation, "censoring survival is zero at grid index " + std::to_string(u));
    j += dl / (su * g_left);
    out[u] = -j;
    prev = su;
    g_left = g[u];
  }
  for (std::size_t u = stop + 1; u < n; ++u) out[u] = -j;
  if (delta == 1 && yidx < n) {
    const double gy = g[yidx - 1];
    if (gy <= 0.0) fail(ErrorKind::PositivityViolation, "censoring survival is zero just before the event");
    const double ev = 1.0 / (floor(s[yidx]) * gy);
    for (std::size_t u = yidx; u < n; ++u) out[u] += ev;
  }
  return floors;
}

/// H at a single time t for an observation, from step curves on a common grid.
inline double h_functional(double y, int delta, const StepCurve& s, const StepCurve& g, const StepCurve& lambda,
                           double t) {
  require(s.grid == g.grid && s.grid == lambda.grid, ErrorKind::InvalidInput, "curves must share a grid");
  std::vector<double> dl(lambda.values.size()), out(lambda.values.size());
  for (std::size_t u = 0; u < dl.size(); ++u) dl[u] = lambda.values[u] - (u ? lambda.values[u - 1] : 0.0);
  h_curve(observed_index(s.grid, y), delta, s.values, g.values, out, dl);
  return t < 0.0 ? 0.0 : out[s.grid.floor_index(t)];
}

}  // namespace fedsurv
