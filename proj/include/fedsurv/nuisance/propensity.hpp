#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "fedsurv/nuisance/logistic.hpp"
#include "fedsurv/rng.hpp"
#include "fedsurv/survcore/cox.hpp"

namespace fedsurv {

inline Eigen::MatrixXd covariate_matrix(const RowView& view) {
  const std::size_t n = view.size();
  const std::size_t d = n ? view[0].x.size() : 0;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& o = view[i];
    require(o.x.size() == d, ErrorKind::InvalidInput, "ragged covariate rows");
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = o.x[j];
  }
  return x;
}

/// P(A = 1 | x) within one training set.
struct PropensityModel {
  LogisticModel fit;
  double lower = 0.01, upper = 0.99;
  bool degenerate = false;  // one arm absent: constant prediction at the clip boundary
  double constant = 0.5;
  double cv_logloss = std::numeric_limits<double>::quiet_NaN();
  double cv_logloss_null = std::numeric_limits<double>::quiet_NaN();

  bool flagged() const { return degenerate || fit.separated; }

  double predict(std::span<const double> x) const {
    if (degenerate) return constant;
    return std::clamp(fit.predict(x), lower, upper);
  }
};

/// Logistic propensity of A on x. With V >= 2 the fit also reports V-fold
/// cross-validated log-loss next to the intercept-only log-loss.
inline PropensityModel fit_propensity(const RowView& train, std::size_t V = 0, std::uint64_t seed = 0) {
  require(train.size() > 0, ErrorKind::InvalidInput, "empty propensity training set");
  const Eigen::MatrixXd x = covariate_matrix(train);
  std::vector<double> y(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) y[i] = train[i].a;
  const double treated = std::accumulate(y.begin(), y.end(), 0.0);

  PropensityModel m;
  if (treated == 0.0 || treated == static_cast<double>(y.size())) {
    m.degenerate = true;
    m.constant = treated == 0.0 ? m.lower : m.upper;
    return m;
  }
  m.fit = fit_logistic(x, y);

  if (V >= 2 && train.size() >= 2 * V) {
    auto eng = make_engine(seed, "propensity_cv");
    std::vector<std::size_t> perm(train.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[eng() % i]);
    double loss = 0.0, loss0 = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      std::vector<Eigen::Index> tr, va;
      for (std::size_t i = 0; i < perm.size(); ++i) (i % V == v ? va : tr).push_back(static_cast<Eigen::Index>(perm[i]));
      Eigen::MatrixXd xt = x(tr, Eigen::all), xv = x(va, Eigen::all);
      std::vector<double> yt, yv;
      for (auto i : tr) yt.push_back(y[static_cast<std::size_t>(i)]);
      for (auto i : va) yv.push_back(y[static_cast<std::size_t>(i)]);
      const double pbar = std::clamp(std::accumulate(yt.begin(), yt.end(), 0.0) / static_cast<double>(yt.size()),
                                     m.lower, m.upper);
      auto fv = fit_logistic(xt, yt);
      std::vector<double> row(static_cast<std::size_t>(x.cols()));
      for (std::size_t i = 0; i < yv.size(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = xv(static_cast<Eigen::Index>(i), j);
        const double p = std::clamp(fv.predict(row), m.lower, m.upper);
        loss -= yv[i] > 0.5 ? std::log(p) : std::log1p(-p);
        loss0 -= yv[i] > 0.5 ? std::log(pbar) : std::log1p(-pbar);
      }
    }
    m.cv_logloss = loss / static_cast<double>(train.size());
    m.cv_logloss_null = loss0 / static_cast<double>(train.size());
  }
  return m;
}

}  // namespace fedsurv
