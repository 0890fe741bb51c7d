#pragma once

// Site-level sufficient statistics for the federated weights. A site contributes,
// per (t, a) cell, the count, means and centered cross-products of its raw EIF
// pieces: (anchor, augmentation) on the target site, augmentation on a source.
// Full-sample, per-CV-fold and per-bootstrap-replicate versions are kept so that
// everything downstream runs on moments alone, centrally or over the wire.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fedsurv/errors.hpp"
#include "fedsurv/rng.hpp"

namespace fedsurv {

/// Weighted count, means and co-moments (sums of centered products) of up to two variables.
struct Moments {
  double w = 0.0;
  double m1 = 0.0, m2 = 0.0;
  double c11 = 0.0, c22 = 0.0, c12 = 0.0;

  double var1() const { return w > 0 ? c11 / w : 0.0; }
  double var2() const { return w > 0 ? c22 / w : 0.0; }
  double cov12() const { return w > 0 ? c12 / w : 0.0; }

  /// Two-pass moments over `idx` (all rows when empty) with optional integer weights.
  static Moments compute(std::span<const double> x1, std::span<const double> x2, std::span<const std::size_t> idx = {}) {
    Moments m;
    const std::size_t n = idx.empty() ? x1.size() : idx.size();
    if (n == 0) return m;
    auto at = [&](std::span<const double> x, std::size_t r) { return x[idx.empty() ? r : idx[r]]; };
    const bool two = !x2.empty();
    for (std::size_t r = 0; r < n; ++r) {
      m.m1 += at(x1, r);
      if (two) m.m2 += at(x2, r);
    }
    m.w = static_cast<double>(n);
    m.m1 /= m.w;
    m.m2 /= m.w;
    for (std::size_t r = 0; r < n; ++r) {
      const double d1 = at(x1, r) - m.m1;
      m.c11 += d1 * d1;
      if (two) {
        const double d2 = at(x2, r) - m.m2;
        m.c22 += d2 * d2;
        m.c12 += d1 * d2;
      }
    }
    return m;
  }

  /// Parallel combination of two disjoint groups.
  Moments merge(const Moments& o) const {
    if (w == 0.0) return o;
    if (o.w == 0.0) return *this;
    Moments m;
    m.w = w + o.w;
    const double d1 = o.m1 - m1, d2 = o.m2 - m2, f = w * o.w / m.w;
    m.m1 = m1 + d1 * o.w / m.w;
    m.m2 = m2 + d2 * o.w / m.w;
    m.c11 = c11 + o.c11 + d1 * d1 * f;
    m.c22 = c22 + o.c22 + d2 * d2 * f;
    m.c12 = c12 + o.c12 + d1 * d2 * f;
    return m;
  }

  friend bool operator==(const Moments&, const Moments&) = default;
};

/// Raw per-row values of one site, laid out [cell][row]; x2 is empty for source sites.
struct SiteValues {
  int site = 0;
  std::size_t rows = 0;
  std::size_t cells = 0;
  std::vector<double> x1, x2;

  std::span<const double> col1(std::size_t c) const { return {x1.data() + c * rows, rows}; }
  std::span<const double> col2(std::size_t c) const {
    return x2.empty() ? std::span<const double>{} : std::span<const double>{x2.data() + c * rows, rows};
  }
};

/// Row-to-fold map of a site for the penalty cross-validation.
inline std::vector<std::vector<std::size_t>> lambda_cv_folds(std::uint64_t seed, int site, std::size_t rows,
                                                             std::size_t V) {
  std::vector<std::size_t> perm(rows);
  for (std::size_t i = 0; i < rows; ++i) perm[i] = i;
  auto eng = make_engine(seed, "lambda_cv", {static_cast<std::uint64_t>(site)});
  for (std::size_t i = rows; i > 1; --i) std::swap(perm[i - 1], perm[eng() % i]);
  std::vector<std::vector<std::size_t>> folds(V);
  for (std::size_t i = 0; i < rows; ++i) folds[i % V].push_back(perm[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

/// Multinomial resampling counts of a site (stratified bootstrap), B x rows.
inline Eigen::MatrixXd bootstrap_counts(std::uint64_t seed, int site, std::size_t rows, std::size_t B) {
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(rows));
  for (std::size_t b = 0; b < B; ++b) {
    auto eng = make_engine(seed, "boot", {static_cast<std::uint64_t>(site), static_cast<std::uint64_t>(b)});
    for (std::size_t i = 0; i < rows; ++i) counts(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(eng() % rows)) += 1.0;
  }
  return counts;
}

struct MomentPlan {
  std::uint64_t seed = 0;
  std::size_t cv_folds = 5;
  std::size_t bootstrap = 0;
};

/// Every moment the optimizer needs from one site.
struct SiteMoments {
  int site = 0;
  std::size_t rows = 0;
  std::vector<Moments> full;                // [cell]
  std::vector<std::vector<Moments>> cv;     // [fold][cell]
  std::vector<std::vector<Moments>> boot;   // [replicate][cell]
};

inline SiteMoments site_moments(const SiteValues& v, const MomentPlan& plan) {
  SiteMoments out;
  out.site = v.site;
  out.rows = v.rows;
  out.full.resize(v.cells);
  for (std::size_t c = 0; c < v.cells; ++c) out.full[c] = Moments::compute(v.col1(c), v.col2(c));

  if (plan.cv_folds >= 2) {
    const auto folds = lambda_cv_folds(plan.seed, v.site, v.rows, plan.cv_folds);
    out.cv.assign(plan.cv_folds, std::vector<Moments>(v.cells));
    for (std::size_t f = 0; f < plan.cv_folds; ++f)
      for (std::size_t c = 0; c < v.cells; ++c) out.cv[f][c] = Moments::compute(v.col1(c), v.col2(c), folds[f]);
  }

  if (plan.bootstrap > 0 && v.rows > 0) {
    const auto counts = bootstrap_counts(plan.seed, v.site, v.rows, plan.bootstrap);
    const auto R = static_cast<Eigen::Index>(v.rows), C = static_cast<Eigen::Index>(v.cells);
    const bool two = !v.x2.empty();
    // shift by the full-sample means so the raw sums below do not cancel
    Eigen::MatrixXd x1 = Eigen::Map<const Eigen::MatrixXd>(v.x1.data(), R, C);
    Eigen::MatrixXd x2;
    for (Eigen::Index c = 0; c < C; ++c) x1.col(c).array() -= out.full[static_cast<std::size_t>(c)].m1;
    if (two) {
      x2 = Eigen::Map<const Eigen::MatrixXd>(v.x2.data(), R, C);
      for (Eigen::Index c = 0; c < C; ++c) x2.col(c).array() -= out.full[static_cast<std::size_t>(c)].m2;
    }
    const Eigen::MatrixXd s1 = counts * x1;
    const Eigen::MatrixXd s11 = counts * x1.cwiseProduct(x1);
    Eigen::MatrixXd s2, s22, s12;
    if (two) {
      s2 = counts * x2;
      s22 = counts * x2.cwiseProduct(x2);
      s12 = counts * x1.cwiseProduct(x2);
    }
    const double w = static_cast<double>(v.rows);
    out.boot.assign(plan.bootstrap, std::vector<Moments>(v.cells));
    for (std::size_t b = 0; b < plan.bootstrap; ++b)
      for (std::size_t c = 0; c < v.cells; ++c) {
        const auto B = static_cast<Eigen::Index>(b), Cc = static_cast<Eigen::Index>(c);
        Moments m;
        m.w = w;
        const double a1 = s1(B, Cc) / w;
        m.m1 = out.full[c].m1 + a1;
        m.c11 = std::max(0.0, s11(B, Cc) - w * a1 * a1);
        if (two) {
          const double a2 = s2(B, Cc) / w;
          m.m2 = out.full[c].m2 + a2;
          m.c22 = std::max(0.0, s22(B, Cc) - w * a2 * a2);
          m.c12 = s12(B, Cc) - w * a1 * a2;
        }
        out.boot[b][c] = m;
      }
  }
  return out;
}

}  // namespace fedsurv
