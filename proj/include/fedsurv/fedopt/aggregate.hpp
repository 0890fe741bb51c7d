#pragma once

// Federated aggregation on site moments: penalty cross-validation, plain and
// bootstrap-averaged weights, the weighted estimate with its plug-in variance,
// and the isotonic-corrected curve. Centralized runs extract the same moments
// from an influence table, so both paths share every line below.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fedsurv/eif/influence.hpp"
#include "fedsurv/fedopt/moments.hpp"
#include "fedsurv/fedopt/quadratic.hpp"
#include "fedsurv/fedopt/solver.hpp"
#include "fedsurv/survcore/nonparametric.hpp"

namespace fedsurv {

/// Penalty grid as multiples of n: 0 and 11 log-spaced values from 1e-2 to 1e4.
inline std::vector<double> default_lambda_grid() {
  std::vector<double> out{0.0};
  for (int i = 0; i <= 10; ++i) out.push_back(std::pow(10.0, -2.0 + 0.6 * i));
  return out;
}

struct FedConfig {
  std::vector<double> lambda_grid = default_lambda_grid();  // multiplied by n
  std::size_t cv_folds = 5;
  std::size_t bootstrap = 0;  // replicates for the bootstrap-averaged weights; 0 disables
  std::uint64_t seed = 0;
  SolverOptions solver;

  MomentPlan moment_plan() const { return {seed, cv_folds, bootstrap}; }
};

/// Everything the optimizer sees: target moments and source moments sorted by site.
struct FedInputs {
  TimeGrid grid;
  SiteMoments target;
  std::vector<SiteMoments> sources;

  std::size_t n() const {
    std::size_t total = target.rows;
    for (const auto& s : sources) total += s.rows;
    return total;
  }
  std::size_t cells() const { return 2 * grid.size(); }
  std::size_t cell(std::size_t g, int a) const { return static_cast<std::size_t>(a) * grid.size() + g; }
  std::vector<int> sites() const {
    std::vector<int> out{target.site};
    for (const auto& s : sources) out.push_back(s.site);
    return out;
  }
};

/// Raw target-site values: x1 = anchor S0(t|a,X), x2 = augmentation, cell = a * |grid| + g.
inline SiteValues target_values(const InfluenceTable& table) {
  SiteValues v;
  v.site = 0;
  const std::size_t G = table.grid().size();
  v.cells = 2 * G;
  for (int a = 0; a < 2; ++a) {
    const auto& s = table.slice({EstimatorKind::TGT, 0}, a);
    if (a == 0) {
      v.rows = s.width();
      v.x1.assign(v.cells * v.rows, 0.0);
      v.x2.assign(v.cells * v.rows, 0.0);
    }
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t r = 0; r < v.rows; ++r) {
        const std::size_t c = static_cast<std::size_t>(a) * G + g;
        v.x1[c * v.rows + r] = s.anchor[g * v.rows + r];
        v.x2[c * v.rows + r] = s.aug[g * v.rows + r];
      }
  }
  return v;
}

/// Raw source-site values: x1 = omega-weighted augmentation of site k.
inline SiteValues source_values(const InfluenceTable& table, int k) {
  SiteValues v;
  v.site = k;
  const std::size_t G = table.grid().size();
  v.cells = 2 * G;
  for (int a = 0; a < 2; ++a) {
    const auto& s = table.slice({EstimatorKind::SITE, k}, a);
    std::vector<std::size_t> pos;
    for (std::size_t r = 0; r < s.width(); ++r)
      if (s.row_site[r] == k) pos.push_back(r);
    if (a == 0) {
      v.rows = pos.size();
      v.x1.assign(v.cells * v.rows, 0.0);
    }
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t j = 0; j < pos.size(); ++j)
        v.x1[(static_cast<std::size_t>(a) * G + g) * v.rows + j] = s.aug[g * s.width() + pos[j]];
  }
  return v;
}

inline FedInputs fed_inputs(const InfluenceTable& table, int num_sites, const FedConfig& cfg) {
  FedInputs in;
  in.grid = table.grid();
  const auto plan = cfg.moment_plan();
  in.target = site_moments(target_values(table), plan);
  for (int k = 1; k < num_sites; ++k) in.sources.push_back(site_moments(source_values(table, k), plan));
  return in;
}

namespace detail {

inline std::vector<double> source_shares(const FedInputs& in) {
  const double n = static_cast<double>(in.n());
  std::vector<double> p;
  for (const auto& s : in.sources) p.push_back(static_cast<double>(s.rows) / n);
  return p;
}

inline Moments training_moments(const SiteMoments& s, std::size_t cell, std::size_t fold) {
  Moments m;
  for (std::size_t f = 0; f < s.cv.size(); ++f)
    if (f != fold) m = m.merge(s.cv[f][cell]);
  return m;
}

}  // namespace detail

inline CellStats full_stats(const FedInputs& in, std::size_t cell) {
  std::vector<const Moments*> src;
  for (const auto& s : in.sources) src.push_back(&s.full[cell]);
  return cell_stats(in.target.full[cell], src, static_cast<double>(in.target.rows) / static_cast<double>(in.n()),
                    detail::source_shares(in));
}

struct LambdaChoice {
  double lambda = 0.0;
  bool fallback = false;
  std::vector<double> scores;  // mean validation loss per grid value (empty on fallback)
};

/// V-fold penalty selection. Each fold fits the weights on the training moments of
/// every site and scores the squared distance between the resulting weighted
/// estimate and the held-out target-only estimate; ties go to the larger penalty.
inline LambdaChoice choose_lambda(const FedInputs& in, std::size_t cell, const FedConfig& cfg) {
  require(!cfg.lambda_grid.empty(), ErrorKind::InvalidInput, "penalty grid is empty");
  const double n = static_cast<double>(in.n());
  LambdaChoice out;
  if (cfg.lambda_grid.size() == 1) {
    out.lambda = cfg.lambda_grid[0] * n;
    return out;
  }
  auto fallback = [&] {
    std::vector<double> sorted = cfg.lambda_grid;
    std::sort(sorted.begin(), sorted.end());
    out.lambda = sorted[sorted.size() / 2] * n;
    out.fallback = true;
    out.scores.clear();
    return out;
  };
  if (in.sources.empty()) {
    out.lambda = *std::max_element(cfg.lambda_grid.begin(), cfg.lambda_grid.end()) * n;
    return out;
  }
  const std::size_t V = in.target.cv.size();
  if (V < 2) return fallback();
  for (const auto& s : in.sources)
    if (s.cv.size() != V) return fallback();
  const double p0 = static_cast<double>(in.target.rows) / n;
  const auto p_src = detail::source_shares(in);
  out.scores.assign(cfg.lambda_grid.size(), 0.0);
  try {
    for (std::size_t v = 0; v < V; ++v) {
      const Moments tgt = detail::training_moments(in.target, cell, v);
      const Moments& val = in.target.cv[v][cell];
      if (tgt.w < 2 || val.w < 1) return fallback();
      std::vector<Moments> train;
      for (const auto& s : in.sources) {
        train.push_back(detail::training_moments(s, cell, v));
        if (train.back().w < 1) return fallback();
      }
      std::vector<const Moments*> ptr;
      for (const auto& m : train) ptr.push_back(&m);
      const CellStats st = cell_stats(tgt, ptr, p0, p_src);
      const double held_out = val.m1 - val.m2;
      for (std::size_t l = 0; l < cfg.lambda_grid.size(); ++l) {
        const auto sol = solve_weights(st.quad, cfg.lambda_grid[l] * n, n, cfg.solver);
        const double d = st.theta(sol.eta) - held_out;
        out.scores[l] += d * d / static_cast<double>(V);
      }
    }
  } catch (const Error&) {
    return fallback();
  }
  const double best = *std::min_element(out.scores.begin(), out.scores.end());
  double chosen = -1.0;
  for (std::size_t l = 0; l < cfg.lambda_grid.size(); ++l)
    if (out.scores[l] <= best * (1.0 + 1e-12) + 1e-300) chosen = std::max(chosen, cfg.lambda_grid[l]);
  out.lambda = chosen * n;
  return out;
}

/// Component-wise mean of the weights solved on B site-stratified resamples, renormalized.
inline WeightSolution solve_weights_bootstrap(const FedInputs& in, std::size_t cell, double lambda,
                                              const FedConfig& cfg, std::size_t* skipped_out = nullptr) {
  const std::size_t B = in.target.boot.size();
  require(B >= 1, ErrorKind::InvalidInput, "bootstrap needs at least one replicate");
  const double n = static_cast<double>(in.n());
  const double p0 = static_cast<double>(in.target.rows) / n;
  const auto p_src = detail::source_shares(in);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(in.sources.size() + 1));
  std::size_t used = 0, skipped = 0;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<const Moments*> src;
    bool ok = true;
    for (const auto& s : in.sources) {
      if (s.boot.size() != B) fail(ErrorKind::InvalidInput, "sites disagree on the number of bootstrap replicates");
      src.push_back(&s.boot[b][cell]);
      ok = ok && s.boot[b][cell].w > 0;
    }
    if (!ok || in.target.boot[b][cell].w <= 0) {
      ++skipped;
      continue;
    }
    try {
      const auto st = cell_stats(in.target.boot[b][cell], src, p0, p_src);
      sum += solve_weights(st.quad, lambda, n, cfg.solver).eta;
      ++used;
    } catch (const Error&) {
      ++skipped;
    }
  }
  if (skipped_out) *skipped_out = skipped;
  require(used > 0 && static_cast<double>(skipped) <= 0.1 * static_cast<double>(B), ErrorKind::BootstrapDegenerate,
          std::to_string(skipped) + " of " + std::to_string(B) + " bootstrap replicates failed");
  WeightSolution sol;
  sol.eta = (sum / static_cast<double>(used)).cwiseMax(0.0);
  sol.eta /= sol.eta.sum();
  sol.lambda = lambda;
  const auto st = full_stats(in, cell);
  sol.chi_sq = st.quad.chi_sq;
  sol.objective = st.quad.value(sol.eta, lambda, n);
  sol.kkt_gap = frank_wolfe_gap(st.quad, sol.eta, lambda, n);
  return sol;
}

/// Weighted estimate sum_k eta_k theta^{k,0} with the four-term plug-in variance.
inline EstimateWithCI fed_estimate(const CellStats& st, const Eigen::VectorXd& eta, std::size_t n) {
  const double v = st.variance(eta);
  return wald_interval(st.theta(eta), std::sqrt(v / static_cast<double>(n)), n);
}

inline EstimateWithCI fed_estimate(const InfluenceTable& table, const WeightSolution& w, double t, int a) {
  const auto m = w.eta.size() - 1;
  FedConfig cfg;
  cfg.cv_folds = 0;
  const auto in = fed_inputs(table, static_cast<int>(m + 1), cfg);
  return fed_estimate(full_stats(in, in.cell(table.grid().index_of(t), a)), w.eta, in.n());
}

struct FedPoint {
  WeightSolution weights;
  EstimateWithCI estimate;  // before isotonic correction
  double variance = 0.0;    // V-hat, so se = sqrt(V-hat / n)
  std::string error;        // nonempty when this cell fell back to the target-only weights
};

struct FedCurveEstimate {
  TimeGrid grid;
  std::vector<int> sites;  // weight order: target first, then sources
  bool bootstrap = false;
  std::array<std::vector<FedPoint>, 2> points;
  std::array<std::vector<EstimateWithCI>, 2> corrected;  // isotonic-corrected estimate, raw se

  const FedPoint& point(double t, int a) const { return points[static_cast<std::size_t>(a)][grid.index_of(t)]; }
  const EstimateWithCI& at(double t, int a) const { return corrected[static_cast<std::size_t>(a)][grid.index_of(t)]; }
  std::vector<std::string> errors() const {
    std::vector<std::string> out;
    for (int a = 0; a < 2; ++a)
      for (std::size_t g = 0; g < grid.size(); ++g)
        if (!points[static_cast<std::size_t>(a)][g].error.empty())
          out.push_back("t=" + format_double(grid[g]) + " a=" + std::to_string(a) + ": " +
                        points[static_cast<std::size_t>(a)][g].error);
    return out;
  }
};

struct FedResult {
  FedCurveEstimate fed;
  std::optional<FedCurveEstimate> boot;  // present when bootstrap replicates were supplied
};

namespace detail {

inline void finish_curve(FedCurveEstimate& c, std::size_t n) {
  for (int a = 0; a < 2; ++a) {
    auto& pts = c.points[static_cast<std::size_t>(a)];
    std::vector<double> raw;
    for (const auto& p : pts) raw.push_back(p.estimate.theta);
    const auto fixed = isotonic_correct(raw);
    auto& out = c.corrected[static_cast<std::size_t>(a)];
    out.clear();
    for (std::size_t g = 0; g < pts.size(); ++g) out.push_back(wald_interval(fixed[g], pts[g].estimate.se, n));
  }
}

inline FedPoint target_only_point(const CellStats& st, std::size_t m, std::size_t n, double lambda, std::string why) {
  FedPoint p;
  p.weights.eta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m + 1));
  p.weights.eta(0) = 1.0;
  p.weights.lambda = lambda;
  p.weights.chi_sq = st.quad.chi_sq;
  p.weights.objective = st.quad.value(p.weights.eta, lambda, static_cast<double>(n));
  p.variance = st.variance(p.weights.eta);
  p.estimate = fed_estimate(st, p.weights.eta, n);
  p.error = std::move(why);
  return p;
}

}  // namespace detail

/// Plain and (when replicates exist) bootstrap-averaged federated curves; the
/// penalty chosen per cell is shared by both.
inline FedResult fed_curves(const FedInputs& in, const FedConfig& cfg) {
  const std::size_t n = in.n();
  const std::size_t m = in.sources.size();
  const bool with_boot = !in.target.boot.empty();
  FedResult res;
  res.fed.grid = in.grid;
  res.fed.sites = in.sites();
  if (with_boot) {
    res.boot.emplace();
    res.boot->grid = in.grid;
    res.boot->sites = res.fed.sites;
    res.boot->bootstrap = true;
  }
  for (int a = 0; a < 2; ++a)
    for (std::size_t g = 0; g < in.grid.size(); ++g) {
      const std::size_t cell = in.cell(g, a);
      const CellStats st = full_stats(in, cell);
      LambdaChoice lc;
      FedPoint p;
      try {
        lc = choose_lambda(in, cell, cfg);
        p.weights = solve_weights(st.quad, lc.lambda, static_cast<double>(n), cfg.solver);
        p.weights.lambda_fallback = lc.fallback;
        p.variance = st.variance(p.weights.eta);
        p.estimate = fed_estimate(st, p.weights.eta, n);
      } catch (const Error& e) {
        p = detail::target_only_point(st, m, n, lc.lambda, e.what());
      }
      res.fed.points[static_cast<std::size_t>(a)].push_back(p);
      if (with_boot) {
        FedPoint q;
        try {
          q.weights = solve_weights_bootstrap(in, cell, lc.lambda, cfg);
          q.weights.lambda_fallback = lc.fallback;
          q.variance = st.variance(q.weights.eta);
          q.estimate = fed_estimate(st, q.weights.eta, n);
        } catch (const Error& e) {
          q = detail::target_only_point(st, m, n, lc.lambda, e.what());
        }
        res.boot->points[static_cast<std::size_t>(a)].push_back(q);
      }
    }
  detail::finish_curve(res.fed, n);
  if (res.boot) detail::finish_curve(*res.boot, n);
  return res;
}

inline FedResult fed_curves(const InfluenceTable& table, int num_sites, const FedConfig& cfg) {
  return fed_curves(fed_inputs(table, num_sites, cfg), cfg);
}

/// Weight trajectory export: t, a, site, eta, chi_sq, lambda (target rows carry chi_sq = 0).
inline void write_weights_csv(std::ostream& out, const FedCurveEstimate& c, bool header = true) {
  if (header) out << "t,a,site,eta,chi_sq,lambda\n";
  for (int a = 0; a < 2; ++a)
    for (std::size_t g = 0; g < c.grid.size(); ++g) {
      const auto& w = c.points[static_cast<std::size_t>(a)][g].weights;
      for (Eigen::Index k = 0; k < w.eta.size(); ++k)
        out << format_double(c.grid[g]) << ',' << a << ',' << c.sites[static_cast<std::size_t>(k)] << ','
            << format_double(w.eta(k)) << ',' << format_double(k == 0 ? 0.0 : w.chi_sq(k - 1)) << ','
            << format_double(w.lambda) << '\n';
    }
}

}  // namespace fedsurv
