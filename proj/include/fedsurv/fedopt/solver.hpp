#pragma once

// Simplex-constrained convex quadratic for the federated weights.
//
// With eta_0 = 1 - sum_{k>=1} eta_k the objective is
//   Q(eta) = c - 2 b'eta_+ + eta_+' G eta_+ + (lambda / n) sum_k eta_k chi_k^2
// where eta_+ are the source weights. Because eta >= 0 on the simplex the L1
// penalty is linear. The solver is a fully-corrective active-set method: it starts
// at the target vertex, adds the vertex with the most negative gradient, and
// minimizes over the current face with minimum-norm Newton steps (so flat
// directions keep their mass on the target), stepping back to the boundary and
// dropping coordinates that reach zero.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fedsurv/errors.hpp"

namespace fedsurv {

struct Quadratic {
  double c = 0.0;
  Eigen::VectorXd b;       // length K - 1
  Eigen::MatrixXd G;       // (K - 1) x (K - 1), symmetric PSD
  Eigen::VectorXd chi_sq;  // length K - 1

  std::size_t sources() const { return static_cast<std::size_t>(b.size()); }

  double value(const Eigen::VectorXd& eta, double lambda, double n) const {
    const auto m = b.size();
    const Eigen::VectorXd e = eta.tail(m);
    return c - 2.0 * b.dot(e) + e.dot(G * e) + (m ? lambda / n * chi_sq.dot(e) : 0.0);
  }
};

struct WeightSolution {
  Eigen::VectorXd eta;    // length K, eta(0) is the target weight
  double lambda = 0.0;
  Eigen::VectorXd chi_sq; // length K - 1
  double objective = 0.0;
  double kkt_gap = 0.0;
  std::size_t iterations = 0;
  bool lambda_fallback = false;  // CV could not score any penalty
};

struct SolverOptions {
  double gap_tolerance = 1e-13;
  double psd_tolerance = 1e-12;
  std::size_t max_iterations = 200;
};

namespace detail {

/// Gradient of Q as a function of the full weight vector (target coordinate has zero gradient).
inline Eigen::VectorXd full_gradient(const Quadratic& q, const Eigen::VectorXd& eta, double pen) {
  const auto m = q.b.size();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(m + 1);
  if (m) g.tail(m) = -2.0 * q.b + 2.0 * q.G * eta.tail(m) + pen * q.chi_sq;
  return g;
}

/// Basis (in full coordinates) of the directions that stay in the affine hull of a face.
inline Eigen::MatrixXd face_directions(const std::vector<int>& active, Eigen::Index dim) {
  const auto s = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(dim, std::max<Eigen::Index>(0, s - 1));
  // e_{active[j]} - e_{active[0]}, j >= 1
  for (Eigen::Index j = 1; j < s; ++j) {
    Z(active[static_cast<std::size_t>(j)], j - 1) = 1.0;
    Z(active[0], j - 1) = -1.0;
  }
  return Z;
}

/// Descent direction on the face: the minimum-norm Newton step when the reduced
/// problem is bounded, otherwise the steepest zero-curvature direction (flag = false).
inline Eigen::VectorXd face_step(const Quadratic& q, const Eigen::VectorXd& grad, const std::vector<int>& active,
                                 bool& newton) {
  const auto dim = grad.size();
  newton = true;
  const Eigen::MatrixXd Z = face_directions(active, dim);
  if (Z.cols() == 0) return Eigen::VectorXd::Zero(dim);
  Eigen::MatrixXd H2 = Eigen::MatrixXd::Zero(dim, dim);
  H2.bottomRightCorner(dim - 1, dim - 1) = 2.0 * q.G;
  const Eigen::MatrixXd Hr = Z.transpose() * H2 * Z;
  const Eigen::VectorXd gr = Z.transpose() * grad;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Hr);
  const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd range = Eigen::VectorXd::Zero(Z.cols()), null = Eigen::VectorXd::Zero(Z.cols());
  for (Eigen::Index i = 0; i < Z.cols(); ++i) {
    const auto v = es.eigenvectors().col(i);
    const double proj = v.dot(gr);
    if (es.eigenvalues()(i) > 1e-12 * top) range -= proj / es.eigenvalues()(i) * v;
    else null -= proj * v;
  }
  if (null.norm() > 1e-12 * std::max(1.0, gr.norm())) {
    newton = false;
    return Z * null;
  }
  return Z * range;
}

}  // namespace detail

inline void check_quadratic(const Quadratic& q, const SolverOptions& opt = {}) {
  const auto m = q.b.size();
  require(q.G.rows() == m && q.G.cols() == m && q.chi_sq.size() == m, ErrorKind::InvalidInput,
          "quadratic pieces have inconsistent sizes");
  if (m == 0) return;
  require(q.G.allFinite() && q.b.allFinite() && q.chi_sq.allFinite(), ErrorKind::NumericalError,
          "quadratic has non-finite entries");
  const double asym = (q.G - q.G.transpose()).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, q.G.cwiseAbs().maxCoeff());
  require(asym <= opt.psd_tolerance * scale, ErrorKind::NumericalError, "Gram matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(q.G, Eigen::EigenvaluesOnly);
  require(es.eigenvalues().minCoeff() >= -opt.psd_tolerance * scale, ErrorKind::NumericalError,
          "Gram matrix is not positive semidefinite (min eigenvalue " + std::to_string(es.eigenvalues().minCoeff()) + ")");
}

inline double frank_wolfe_gap(const Quadratic& q, const Eigen::VectorXd& eta, double lambda, double n) {
  const auto g = detail::full_gradient(q, eta, lambda / n);
  return g.dot(eta) - g.minCoeff();
}

inline WeightSolution solve_weights(const Quadratic& q, double lambda, double n, const SolverOptions& opt = {}) {
  require(lambda >= 0.0, ErrorKind::InvalidInput, "penalty must be nonnegative");
  require(n > 0.0, ErrorKind::InvalidInput, "sample size must be positive");
  check_quadratic(q, opt);
  const auto m = q.b.size();
  const double pen = lambda / n;
  WeightSolution sol;
  sol.lambda = lambda;
  sol.chi_sq = q.chi_sq;
  sol.eta = Eigen::VectorXd::Zero(m + 1);
  sol.eta(0) = 1.0;
  if (m == 0) {
    sol.objective = q.c;
    return sol;
  }
  const double tol = opt.gap_tolerance *
                     std::max({1.0, std::abs(q.c), q.b.cwiseAbs().maxCoeff(), q.G.cwiseAbs().maxCoeff(),
                               pen * q.chi_sq.cwiseAbs().maxCoeff()});
  std::vector<int> active{0};
  Eigen::VectorXd& eta = sol.eta;
  std::size_t it = 0;
  for (; it < opt.max_iterations; ++it) {
    auto g = detail::full_gradient(q, eta, pen);
    Eigen::Index best = 0;
    g.minCoeff(&best);
    if (g.dot(eta) - g(best) <= tol) break;
    if (std::find(active.begin(), active.end(), static_cast<int>(best)) == active.end()) {
      active.push_back(static_cast<int>(best));
      std::sort(active.begin(), active.end());
    }
    // fully corrective: minimize over the face, dropping blocking coordinates
    for (std::size_t inner = 0; inner < 4 * (static_cast<std::size_t>(m) + 2); ++inner) {
      g = detail::full_gradient(q, eta, pen);
      bool newton = true;
      const Eigen::VectorXd d = detail::face_step(q, g, active, newton);
      if (g.dot(d) >= 0.0 || d.cwiseAbs().maxCoeff() <= 1e-15) break;
      double step = newton ? 1.0 : INFINITY;
      int leaving = -1;
      for (int i : active)
        if (d(i) < 0.0 && -eta(i) / d(i) < step) step = -eta(i) / d(i), leaving = i;
      if (!std::isfinite(step)) break;
      eta += step * d;
      if (leaving < 0) break;
      eta(leaving) = 0.0;
      active.erase(std::find(active.begin(), active.end(), leaving));
    }
    for (Eigen::Index i = 0; i <= m; ++i) eta(i) = std::max(0.0, eta(i));
    eta /= eta.sum();
    active.erase(std::remove_if(active.begin(), active.end(), [&](int i) { return eta(i) == 0.0; }), active.end());
    if (active.empty()) {
      eta.setZero();
      eta(0) = 1.0;
      active.push_back(0);
    }
  }
  sol.iterations = it;
  sol.kkt_gap = frank_wolfe_gap(q, eta, lambda, n);
  sol.objective = q.value(eta, lambda, n);
  return sol;
}

}  // namespace fedsurv
