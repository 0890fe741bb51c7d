#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedsurv/errors.hpp"

namespace fedsurv {

/// One subject record: baseline covariates, treatment, observed time, event flag, site.
struct Observation {
  std::vector<double> x;
  int a = 0;
  double y = 0.0;
  int delta = 0;
  int r = 0;
};

using Dataset = std::vector<Observation>;

inline void validate(const Observation& o, int num_sites = -1) {
  require(o.y >= 0.0 && std::isfinite(o.y), ErrorKind::InvalidInput, "observed time must be finite and >= 0");
  require(o.a == 0 || o.a == 1, ErrorKind::InvalidInput, "treatment must be 0 or 1");
  require(o.delta == 0 || o.delta == 1, ErrorKind::InvalidInput, "event indicator must be 0 or 1");
  require(o.r >= 0 && (num_sites < 0 || o.r < num_sites), ErrorKind::InvalidInput, "site id out of range");
  for (double v : o.x) require(std::isfinite(v), ErrorKind::InvalidInput, "covariates must be finite");
}

inline int num_sites(const Dataset& data) {
  int k = 0;
  for (const auto& o : data) k = std::max(k, o.r + 1);
  return k;
}

inline std::vector<std::vector<std::size_t>> rows_by_site(const Dataset& data, int sites) {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(sites));
  for (std::size_t i = 0; i < data.size(); ++i) out[static_cast<std::size_t>(data[i].r)].push_back(i);
  return out;
}

/// Time grid {0 = t_0 < t_1 < ... < t_m = tau}. Cheap to copy; points are shared.
class TimeGrid {
 public:
  TimeGrid() : points_(std::make_shared<const std::vector<double>>(std::vector<double>{0.0})) {}

  explicit TimeGrid(std::vector<double> points) {
    require(!points.empty(), ErrorKind::InvalidInput, "time grid must be nonempty");
    require(points.front() == 0.0, ErrorKind::InvalidInput, "time grid must start at 0");
    for (std::size_t i = 1; i < points.size(); ++i)
      require(points[i] > points[i - 1], ErrorKind::InvalidInput, "time grid must be strictly increasing");
    points_ = std::make_shared<const std::vector<double>>(std::move(points));
  }

  /// Regular grid 0, step, 2*step, ..., tau (tau appended if step does not divide it).
  static TimeGrid regular(double tau, double step) {
    require(tau > 0.0 && step > 0.0, ErrorKind::InvalidInput, "tau and step must be positive");
    std::vector<double> pts;
    const auto m = static_cast<std::size_t>(std::floor(tau / step + 1e-9));
    for (std::size_t i = 0; i <= m; ++i) pts.push_back(static_cast<double>(i) * step);
    if (tau - pts.back() > 1e-9 * tau) pts.push_back(tau);
    else pts.back() = tau;
    return TimeGrid(std::move(pts));
  }

  /// Grid made of 0 and every distinct value in `times`.
  static TimeGrid from_times(std::span<const double> times) {
    std::vector<double> pts(times.begin(), times.end());
    pts.push_back(0.0);
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() == 1) pts.push_back(1.0);
    return TimeGrid(std::move(pts));
  }

  std::size_t size() const { return points_->size(); }
  double tau() const { return points_->back(); }
  double operator[](std::size_t i) const { return (*points_)[i]; }
  std::span<const double> points() const { return *points_; }

  /// Largest index with point <= t (0 for t below the grid).
  std::size_t floor_index(double t) const {
    const auto& p = *points_;
    auto it = std::upper_bound(p.begin(), p.end(), t);
    if (it == p.begin()) return 0;
    return static_cast<std::size_t>(it - p.begin()) - 1;
  }

  /// Smallest index with point >= y; size() when y > tau.
  std::size_t ceil_index(double y) const {
    const auto& p = *points_;
    return static_cast<std::size_t>(std::lower_bound(p.begin(), p.end(), y) - p.begin());
  }

  /// Index of an exact grid point.
  std::size_t index_of(double t) const {
    std::size_t i = floor_index(t);
    require((*points_)[i] == t, ErrorKind::InvalidInput, "time " + std::to_string(t) + " is not a grid point");
    return i;
  }

  friend bool operator==(const TimeGrid& a, const TimeGrid& b) {
    return a.points_ == b.points_ || *a.points_ == *b.points_;
  }

 private:
  std::shared_ptr<const std::vector<double>> points_;
};

enum class CurveKind { Survival, CumHazard };

/// Right-continuous step function stored on a TimeGrid.
struct StepCurve {
  TimeGrid grid;
  std::vector<double> values;
  CurveKind kind = CurveKind::Survival;

  double operator()(double t) const {
    if (t < 0.0) return kind == CurveKind::Survival ? 1.0 : 0.0;
    return values[grid.floor_index(t)];
  }

  /// Left limit at t.
  double left_limit(double t) const {
    auto p = grid.points();
    auto it = std::lower_bound(p.begin(), p.end(), t);
    if (it == p.begin()) return kind == CurveKind::Survival ? 1.0 : 0.0;
    return values[static_cast<std::size_t>(it - p.begin()) - 1];
  }

  /// Same curve sampled on another grid (right-continuous lookup).
  StepCurve resample(const TimeGrid& target) const {
    StepCurve out{target, std::vector<double>(target.size()), kind};
    for (std::size_t i = 0; i < target.size(); ++i) out.values[i] = (*this)(target[i]);
    return out;
  }
};

/// Positivity floor applied to survival values before they appear in a denominator.
inline constexpr double kSurvivalFloor = 1e-12;

}  // namespace fedsurv
