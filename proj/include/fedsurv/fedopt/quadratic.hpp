#pragma once

// The federated objective
//   Q(eta) = P_n[(phi*^0 - sum_{k>=1} eta_k phi*^{k,0})^2] + (lambda/n) sum_k eta_k chi_k^2
//          = c - 2 b'eta_+ + eta_+' G eta_+ + penalty,
// with c = P_n[(phi*^0)^2], b_k = P_n[phi*^0 phi*^{k,0}], G_jk = P_n[phi*^{j,0} phi*^{k,0}].
// Source influence values live on target rows (anchor) and site-k rows
// (augmentation), so off-diagonal G entries only involve target-site anchors.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "fedsurv/eif/influence.hpp"
#include "fedsurv/fedopt/moments.hpp"
#include "fedsurv/fedopt/solver.hpp"

namespace fedsurv {

/// Per-cell summaries assembled from site moments.
struct CellStats {
  double theta0 = 0.0;
  Eigen::VectorXd theta_site;  // theta^{k,0}, k = 1..K-1
  Quadratic quad;
  double p0 = 1.0;
  Eigen::VectorXd p_src;
  double var_u = 0.0, var_anchor = 0.0, cov_u_anchor = 0.0;  // target-site pieces (u = anchor - aug)
  Eigen::VectorXd var_src;

  double theta(const Eigen::VectorXd& eta) const {
    double v = eta(0) * theta0;
    for (Eigen::Index k = 0; k < theta_site.size(); ++k) v += eta(k + 1) * theta_site(k);
    return v;
  }

  /// Four-term plug-in variance of the weighted estimator at fixed weights.
  double variance(const Eigen::VectorXd& eta) const {
    const double s = eta.tail(eta.size() - 1).sum();
    double v = ((1.0 - s) * (1.0 - s) * var_u + s * s * var_anchor + 2.0 * s * (1.0 - s) * cov_u_anchor) / p0;
    for (Eigen::Index k = 0; k < var_src.size(); ++k) v += eta(k + 1) * eta(k + 1) * var_src(k) / p_src(k);
    return std::max(0.0, v);
  }
};

inline CellStats cell_stats(const Moments& target, const std::vector<const Moments*>& sources, double p0,
                            const std::vector<double>& p_src) {
  CellStats st;
  const auto m = static_cast<Eigen::Index>(sources.size());
  st.p0 = p0;
  st.theta0 = target.m1 - target.m2;
  st.var_anchor = target.var1();
  const double var_aug = target.var2(), cov = target.cov12();
  st.var_u = std::max(0.0, st.var_anchor + var_aug - 2.0 * cov);
  st.cov_u_anchor = st.var_anchor - cov;
  st.theta_site.resize(m);
  st.var_src.resize(m);
  st.p_src.resize(m);
  st.quad.c = st.var_u / p0;
  st.quad.b.resize(m);
  st.quad.G = Eigen::MatrixXd::Constant(m, m, st.var_anchor / p0);
  st.quad.chi_sq.resize(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Moments& s = *sources[static_cast<std::size_t>(k)];
    st.theta_site(k) = target.m1 - s.m1;
    st.var_src(k) = s.var1();
    st.p_src(k) = p_src[static_cast<std::size_t>(k)];
    st.quad.b(k) = st.cov_u_anchor / p0;
    st.quad.G(k, k) += st.var_src(k) / st.p_src(k);
    const double chi = st.theta_site(k) - st.theta0;
    st.quad.chi_sq(k) = chi * chi;
  }
  return st;
}

/// Quadratic pieces computed directly from the per-observation centered influence values.
inline Quadratic build_quadratic(const InfluenceTable& table, double t, int a, int num_sites) {
  const std::size_t g = table.grid().index_of(t);
  const std::size_t n = table.n();
  require(n > 0, ErrorKind::EmptyTable, "influence table is empty");
  const auto& tgt = table.slice({EstimatorKind::TGT, 0}, a);
  std::vector<double> phi0(n, 0.0);
  for (std::size_t r = 0; r < tgt.width(); ++r) phi0[tgt.rows[r]] = tgt.phi_centered(g, r);
  const auto m = static_cast<Eigen::Index>(num_sites - 1);
  std::vector<std::vector<double>> phi(static_cast<std::size_t>(m), std::vector<double>(n, 0.0));
  Quadratic q;
  q.b.resize(m);
  q.G.resize(m, m);
  q.chi_sq.resize(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const auto& s = table.slice({EstimatorKind::SITE, static_cast<int>(k + 1)}, a);
    for (std::size_t r = 0; r < s.width(); ++r) phi[static_cast<std::size_t>(k)][s.rows[r]] = s.phi_centered(g, r);
    const double chi = s.theta[g] - tgt.theta[g];
    q.chi_sq(k) = chi * chi;
  }
  double c = 0.0;
  for (double v : phi0) c += v * v;
  q.c = c / static_cast<double>(n);
  for (Eigen::Index j = 0; j < m; ++j) {
    double bj = 0.0;
    for (std::size_t i = 0; i < n; ++i) bj += phi0[i] * phi[static_cast<std::size_t>(j)][i];
    q.b(j) = bj / static_cast<double>(n);
    for (Eigen::Index k = 0; k <= j; ++k) {
      double gjk = 0.0;
      for (std::size_t i = 0; i < n; ++i) gjk += phi[static_cast<std::size_t>(j)][i] * phi[static_cast<std::size_t>(k)][i];
      q.G(j, k) = q.G(k, j) = gjk / static_cast<double>(n);
    }
  }
  return q;
}

/// Direct per-observation variance of sum_k eta_k phi*^{k,0} (eta_0 on the target estimator).
inline double direct_fed_variance(const InfluenceTable& table, const Eigen::VectorXd& eta, double t, int a) {
  const std::size_t g = table.grid().index_of(t);
  const std::size_t n = table.n();
  std::vector<double> psi(n, 0.0);
  const auto& tgt = table.slice({EstimatorKind::TGT, 0}, a);
  for (std::size_t r = 0; r < tgt.width(); ++r) psi[tgt.rows[r]] += eta(0) * tgt.phi_centered(g, r);
  for (Eigen::Index k = 1; k < eta.size(); ++k) {
    const auto& s = table.slice({EstimatorKind::SITE, static_cast<int>(k)}, a);
    for (std::size_t r = 0; r < s.width(); ++r) psi[s.rows[r]] += eta(k) * s.phi_centered(g, r);
  }
  double v = 0.0;
  for (double x : psi) v += x * x;
  return v / static_cast<double>(n);
}

}  // namespace fedsurv
