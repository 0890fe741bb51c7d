#pragma once

// Density ratio omega(x) = p(x | target) / p(x | source), log-linear in x.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <vector>

#include "fedsurv/nuisance/logistic.hpp"
#include "fedsurv/nuisance/propensity.hpp"

namespace fedsurv {

struct RatioModel {
  double alpha = 0.0;
  std::vector<double> beta;  // empty means omega == exp(alpha)
  double cap = 20.0;
  bool fallback = false;     // identity ratio used after a failed fit

  double log_ratio(std::span<const double> x) const {
    double z = alpha;
    for (std::size_t j = 0; j < beta.size(); ++j) z += beta[j] * x[j];
    return z;
  }
  double unclipped(std::span<const double> x) const { return std::exp(log_ratio(x)); }
  double operator()(std::span<const double> x) const { return std::clamp(unclipped(x), 1.0 / cap, cap); }

  static RatioModel identity(std::size_t d, double cap = 20.0) { return {0.0, std::vector<double>(d, 0.0), cap, false}; }
};

/// Covariate mean and (maximum-likelihood, divide-by-n) covariance of one site.
struct SiteCovariateSummary {
  int site = 0;
  std::size_t n = 0;
  std::vector<double> mean;
  std::vector<std::vector<double>> cov;
};

inline void to_json(nlohmann::json& j, const SiteCovariateSummary& s) {
  j = nlohmann::json{{"site", s.site}, {"n", s.n}, {"mean", s.mean}, {"cov", s.cov}};
}

inline void from_json(const nlohmann::json& j, SiteCovariateSummary& s) {
  j.at("site").get_to(s.site);
  j.at("n").get_to(s.n);
  j.at("mean").get_to(s.mean);
  j.at("cov").get_to(s.cov);
  require(s.n >= 1, ErrorKind::InvalidInput, "covariate summary needs n >= 1");
  require(s.cov.size() == s.mean.size(), ErrorKind::InvalidInput, "covariance dimension mismatch");
  for (const auto& row : s.cov) require(row.size() == s.mean.size(), ErrorKind::InvalidInput, "covariance not square");
}

inline SiteCovariateSummary summarize_covariates(const RowView& view, int site) {
  require(view.size() > 0, ErrorKind::InvalidInput, "cannot summarize an empty site");
  const Eigen::MatrixXd x = covariate_matrix(view);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd c = x.rowwise() - mu;
  Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(x.rows());
  cov = 0.5 * (cov + cov.transpose());
  SiteCovariateSummary s;
  s.site = site;
  s.n = view.size();
  s.mean.assign(mu.data(), mu.data() + mu.size());
  s.cov.assign(static_cast<std::size_t>(x.cols()), std::vector<double>(static_cast<std::size_t>(x.cols())));
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j) s.cov[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = cov(i, j);
  return s;
}

/// Logistic discrimination of target (label 1) vs source rows, inverted by Bayes' rule:
/// omega = p/(1-p) * n_source/n_target.
inline RatioModel fit_density_ratio_pooled(const Eigen::MatrixXd& target_x, const Eigen::MatrixXd& source_x,
                                           double cap = 20.0) {
  require(target_x.rows() > 0 && source_x.rows() > 0, ErrorKind::InvalidInput, "density ratio needs both samples");
  require(target_x.cols() == source_x.cols(), ErrorKind::InvalidInput, "covariate dimension mismatch");
  Eigen::MatrixXd x(target_x.rows() + source_x.rows(), target_x.cols());
  x << target_x, source_x;
  std::vector<double> y(static_cast<std::size_t>(x.rows()), 0.0);
  std::fill(y.begin(), y.begin() + target_x.rows(), 1.0);
  auto fit = fit_logistic(x, y);
  RatioModel m;
  m.cap = cap;
  m.alpha = fit.intercept + std::log(static_cast<double>(source_x.rows()) / static_cast<double>(target_x.rows()));
  m.beta = fit.coef;
  return m;
}

/// Exponential tilt exp(alpha + beta'x) whose moments of (1, X) under a Gaussian
/// working model for the source match the target's (1, mean). Solved by damped
/// Newton on the convex dual f = E_s[exp(alpha + beta'X)] - alpha - beta' mu_t.
inline RatioModel fit_density_ratio_coarse(const SiteCovariateSummary& target, const SiteCovariateSummary& source,
                                           double cap = 20.0) {
  const std::size_t d = target.mean.size();
  require(source.mean.size() == d, ErrorKind::InvalidInput, "covariate dimension mismatch");
  const auto D = static_cast<Eigen::Index>(d);
  Eigen::VectorXd mu_s(D), mu_t(D);
  Eigen::MatrixXd sigma(D, D);
  for (std::size_t i = 0; i < d; ++i) {
    mu_s(static_cast<Eigen::Index>(i)) = source.mean[i];
    mu_t(static_cast<Eigen::Index>(i)) = target.mean[i];
    for (std::size_t j = 0; j < d; ++j) sigma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = source.cov[i][j];
  }

  auto evaluate = [&](const Eigen::VectorXd& th, double& f, Eigen::VectorXd* g, Eigen::MatrixXd* h) {
    const double alpha = th(0);
    const Eigen::VectorXd b = th.tail(D);
    const double logm = alpha + b.dot(mu_s) + 0.5 * b.dot(sigma * b);
    const double m = std::exp(logm);
    f = m - alpha - b.dot(mu_t);
    if (!g) return;
    const Eigen::VectorXd mv = mu_s + sigma * b;
    g->resize(D + 1);
    (*g)(0) = m - 1.0;
    g->tail(D) = m * mv - mu_t;
    h->resize(D + 1, D + 1);
    (*h)(0, 0) = m;
    h->block(1, 0, D, 1) = m * mv;
    h->block(0, 1, 1, D) = m * mv.transpose();
    h->block(1, 1, D, D) = m * (sigma + mv * mv.transpose());
  };

  Eigen::VectorXd th = Eigen::VectorXd::Zero(D + 1);
  double f = 0.0;
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
  evaluate(th, f, &g, &h);
  bool converged = false;
  for (int it = 0; it < 100; ++it) {
    if (g.cwiseAbs().maxCoeff() < 1e-12) {
      converged = true;
      break;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 1e-14 * std::max(1.0, h.diagonal().maxCoeff()))
      break;
    const Eigen::VectorXd step = ldlt.solve(g);
    if (!step.allFinite()) break;
    double scale = 1.0, fn = 0.0;
    Eigen::VectorXd cand;
    for (int k = 0; k < 60; ++k) {
      cand = th - scale * step;
      evaluate(cand, fn, nullptr, nullptr);
      if (std::isfinite(fn) && fn <= f) break;
      scale *= 0.5;
    }
    if (!std::isfinite(fn)) break;
    th = cand;
    evaluate(th, f, &g, &h);
  }
  if (!converged || !th.allFinite())
    fail(ErrorKind::CoarseRatioFailure, "exponential tilt did not converge for site " + std::to_string(source.site));
  RatioModel m;
  m.cap = cap;
  m.alpha = th(0);
  m.beta.assign(th.data() + 1, th.data() + 1 + D);
  return m;
}

}  // namespace fedsurv
