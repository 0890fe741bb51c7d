#pragma once

// Kaplan-Meier, Nelson-Aalen, discrete product integral and isotonic correction.
//
// Grid convention shared by every curve in the library: the value stored at
// grid index 0 is the value at time 0 (S = 1, Lambda = 0). An event recorded
// at exactly y = 0 is treated as happening at 0+ and shows up from grid
// index 1 on.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "fedsurv/survcore/types.hpp"

namespace fedsurv {

struct TimeEvent {
  double y = 0.0;
  int delta = 0;
};

namespace detail {

struct RiskSetStep {
  double time;
  double events;   // weighted d_j
  double at_risk;  // weighted n_j
};

inline std::vector<RiskSetStep> risk_set_steps(std::span<const TimeEvent> data, std::span<const double> weights) {
  require(!data.empty(), ErrorKind::InvalidInput, "empty survival data");
  require(weights.empty() || weights.size() == data.size(), ErrorKind::InvalidInput,
          "weights must match data length");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    require(data[i].y >= 0.0, ErrorKind::InvalidInput, "negative time");
    require(data[i].delta == 0 || data[i].delta == 1, ErrorKind::InvalidInput, "event indicator must be 0/1");
    const double w = weights.empty() ? 1.0 : weights[i];
    require(w >= 0.0, ErrorKind::InvalidInput, "weights must be nonnegative");
    total += w;
  }
  require(total > 0.0, ErrorKind::InvalidInput, "weights are all zero");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return data[i].y < data[j].y; });

  std::vector<RiskSetStep> steps;
  double at_risk = total;
  for (std::size_t k = 0; k < order.size();) {
    const double t = data[order[k]].y;
    double d = 0.0, leaving = 0.0;
    while (k < order.size() && data[order[k]].y == t) {
      const double w = weights.empty() ? 1.0 : weights[order[k]];
      if (data[order[k]].delta == 1) d += w;
      leaving += w;
      ++k;
    }
    if (d > 0.0) steps.push_back({t, d, at_risk});
    at_risk -= leaving;
  }
  return steps;
}

// Distinct observed times; a time-zero observation gets its own 0+ cell so that
// jumps at 0 and at the first positive time stay separate.
inline TimeGrid default_grid(std::span<const TimeEvent> data) {
  std::vector<double> t;
  t.reserve(data.size() + 1);
  for (const auto& d : data) t.push_back(d.y);
  if (std::find(t.begin(), t.end(), 0.0) != t.end()) t.push_back(std::nextafter(0.0, 1.0));
  return TimeGrid::from_times(t);
}

/// Fills `out` with the right-continuous accumulation of per-step factors on the grid.
template <class StepValue, class Combine>
void accumulate_on_grid(const std::vector<RiskSetStep>& steps, const TimeGrid& grid, double init,
                        StepValue step_value, Combine combine, std::vector<double>& out) {
  out.assign(grid.size(), init);
  double acc = init;
  std::size_t s = 0;
  for (std::size_t g = 1; g < grid.size(); ++g) {
    while (s < steps.size() && steps[s].time <= grid[g]) acc = combine(acc, step_value(steps[s++]));
    out[g] = acc;
  }
}

}  // namespace detail

/// Kaplan-Meier survival curve. Weights (optional) scale both events and risk sets.
inline StepCurve km_fit(std::span<const TimeEvent> data, std::span<const double> weights = {},
                        std::optional<TimeGrid> grid = std::nullopt) {
  const auto steps = detail::risk_set_steps(data, weights);
  StepCurve out{grid ? *grid : detail::default_grid(data), {}, CurveKind::Survival};
  detail::accumulate_on_grid(
      steps, out.grid, 1.0, [](const detail::RiskSetStep& s) { return 1.0 - s.events / s.at_risk; },
      [](double acc, double f) { return acc * f; }, out.values);
  for (double& v : out.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

/// Nelson-Aalen cumulative hazard: sum of d_j / n_j over event times <= t.
inline StepCurve nelson_aalen_fit(std::span<const TimeEvent> data, std::span<const double> weights = {},
                                  std::optional<TimeGrid> grid = std::nullopt) {
  const auto steps = detail::risk_set_steps(data, weights);
  StepCurve out{grid ? *grid : detail::default_grid(data), {}, CurveKind::CumHazard};
  detail::accumulate_on_grid(
      steps, out.grid, 0.0, [](const detail::RiskSetStep& s) { return s.events / s.at_risk; },
      [](double acc, double f) { return acc + f; }, out.values);
  return out;
}

/// Discrete product integral S(t) = prod_{u <= t} (1 - dLambda(u)).
inline StepCurve product_integral(const StepCurve& lambda) {
  require(lambda.kind == CurveKind::CumHazard, ErrorKind::InvalidInput, "product_integral expects a cumulative hazard");
  StepCurve out{lambda.grid, std::vector<double>(lambda.values.size()), CurveKind::Survival};
  double s = 1.0, prev = 0.0;
  for (std::size_t i = 0; i < lambda.values.size(); ++i) {
    const double jump = lambda.values[i] - prev;
    require(jump >= -1e-12, ErrorKind::InvalidHazard, "cumulative hazard must be non-decreasing");
    require(jump <= 1.0 + 1e-12, ErrorKind::InvalidHazard, "hazard jump exceeds 1");
    s *= 1.0 - std::clamp(jump, 0.0, 1.0);
    out.values[i] = s;
    prev = lambda.values[i];
  }
  return out;
}

/// Pool-adjacent-violators: L2 projection onto non-increasing sequences (in place).
inline void pava_nonincreasing(std::span<double> v, std::span<const double> weights = {}) {
  const std::size_t n = v.size();
  if (n < 2) return;
  struct Block {
    double sum_wv, sum_w;
    std::size_t len;
  };
  std::vector<Block> blocks;
  blocks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    blocks.push_back({w * v[i], w, 1});
    // non-increasing: merge while the previous block mean is below the last one
    while (blocks.size() > 1) {
      const Block& b = blocks.back();
      const Block& a = blocks[blocks.size() - 2];
      if (a.sum_wv * b.sum_w >= b.sum_wv * a.sum_w) break;
      Block merged{a.sum_wv + b.sum_wv, a.sum_w + b.sum_w, a.len + b.len};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  std::size_t i = 0;
  for (const auto& b : blocks) {
    const double mean = b.sum_wv / b.sum_w;
    for (std::size_t k = 0; k < b.len; ++k) v[i++] = mean;
  }
}

/// Non-increasing L2 projection followed by clamping to [0, 1]. Idempotent.
inline StepCurve isotonic_correct(StepCurve curve) {
  pava_nonincreasing(curve.values);
  for (double& v : curve.values) v = std::clamp(v, 0.0, 1.0);
  curve.kind = CurveKind::Survival;
  return curve;
}

inline std::vector<double> isotonic_correct(std::vector<double> values) {
  pava_nonincreasing(values);
  for (double& v : values) v = std::clamp(v, 0.0, 1.0);
  return values;
}

}  // namespace fedsurv
