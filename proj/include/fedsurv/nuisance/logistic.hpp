#pragma once

// Ridge-stabilized logistic regression by Newton-IRLS, fitted on standardized
// covariates and reported on the raw scale.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fedsurv/errors.hpp"

namespace fedsurv {

struct LogisticModel {
  double intercept = 0.0;
  std::vector<double> coef;
  bool separated = false;   // coefficients ran off (perfect or quasi separation)
  std::size_t iterations = 0;

  double logit(std::span<const double> x) const {
    double z = intercept;
    for (std::size_t j = 0; j < coef.size(); ++j) z += coef[j] * x[j];
    return z;
  }
  double predict(std::span<const double> x) const { return 1.0 / (1.0 + std::exp(-logit(x))); }
};

struct LogisticOptions {
  double ridge = 1e-8;
  std::size_t max_iterations = 50;
  double grad_tolerance = 1e-12;
  double separation_bound = 30.0;  // on the standardized scale
};

inline double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

/// Logistic regression of y in {0,1} on the rows of x (n x d); an intercept is always included.
inline LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const double> y, const LogisticOptions& opt = {}) {
  const Eigen::Index n = x.rows(), d = x.cols();
  require(n > 0, ErrorKind::InvalidInput, "empty logistic regression");
  require(static_cast<Eigen::Index>(y.size()) == n, ErrorKind::InvalidInput, "label length mismatch");

  Eigen::VectorXd mean = x.colwise().mean();
  Eigen::VectorXd sd(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double s = std::sqrt((x.col(j).array() - mean(j)).square().mean());
    sd(j) = s > 1e-12 * std::max(1.0, std::abs(mean(j))) ? s : 0.0;
  }
  Eigen::MatrixXd z(n, d + 1);
  z.col(0).setOnes();
  for (Eigen::Index j = 0; j < d; ++j)
    z.col(j + 1) = sd(j) > 0.0 ? Eigen::VectorXd((x.col(j).array() - mean(j)) / sd(j)) : Eigen::VectorXd::Zero(n);
  Eigen::Map<const Eigen::VectorXd> yy(y.data(), n);

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
  const double ybar = yy.mean();
  if (ybar > 0.0 && ybar < 1.0) beta(0) = std::log(ybar / (1.0 - ybar));

  LogisticModel model;
  const double nn = static_cast<double>(n);
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    const Eigen::VectorXd eta = z * beta;
    const Eigen::VectorXd p = (1.0 / (1.0 + (-eta.array()).exp())).matrix();
    Eigen::VectorXd grad = z.transpose() * (yy - p) / nn - opt.ridge * beta;
    model.iterations = it + 1;
    if (grad.cwiseAbs().maxCoeff() < opt.grad_tolerance) break;
    const Eigen::VectorXd w = (p.array() * (1.0 - p.array())).matrix();
    Eigen::MatrixXd info = z.transpose() * w.asDiagonal() * z / nn;
    info.diagonal().array() += opt.ridge;
    for (Eigen::Index j = 1; j <= d; ++j)
      if (sd(j - 1) == 0.0) info(j, j) += 1.0;  // constant column carries no information
    const Eigen::VectorXd step = info.ldlt().solve(grad);
    if (!step.allFinite()) break;
    // damped step keeps the iteration stable under separation
    const double norm = step.cwiseAbs().maxCoeff();
    beta += norm > 5.0 ? Eigen::VectorXd(step * (5.0 / norm)) : step;
    if (beta.tail(d).cwiseAbs().maxCoeff() > opt.separation_bound || std::abs(beta(0)) > opt.separation_bound) {
      model.separated = true;
      break;
    }
  }
  model.coef.assign(static_cast<std::size_t>(d), 0.0);
  model.intercept = beta(0);
  for (Eigen::Index j = 0; j < d; ++j) {
    if (sd(j) == 0.0) continue;
    model.coef[static_cast<std::size_t>(j)] = beta(j + 1) / sd(j);
    model.intercept -= beta(j + 1) * mean(j) / sd(j);
  }
  return model;
}

/// Mean negative log-likelihood of `model` on (x, y).
inline double logistic_logloss(const LogisticModel& model, const Eigen::MatrixXd& x, std::span<const double> y) {
  double s = 0.0;
  std::vector<double> row(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
    const double z = model.logit(row);
    s -= y[static_cast<std::size_t>(i)] > 0.5 ? log_sigmoid(z) : log_sigmoid(-z);
  }
  return s / static_cast<double>(x.rows());
}

}  // namespace fedsurv
