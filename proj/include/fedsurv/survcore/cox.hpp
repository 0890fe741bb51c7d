#pragma once

// Cox proportional hazards on the design [x, a] with Breslow ties and a
// Breslow baseline cumulative hazard.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "fedsurv/survcore/nonparametric.hpp"
#include "fedsurv/survcore/types.hpp"

namespace fedsurv {

enum class Outcome { Event, Censoring };

/// Row subset of a dataset; an empty index list means "all rows".
struct RowView {
  const Dataset* data = nullptr;
  std::span<const std::size_t> rows;

  RowView(const Dataset& d, std::span<const std::size_t> r = {}) : data(&d), rows(r) {}

  std::size_t size() const { return rows.empty() ? data->size() : rows.size(); }
  const Observation& operator[](std::size_t i) const { return (*data)[rows.empty() ? i : rows[i]]; }
  std::size_t row_id(std::size_t i) const { return rows.empty() ? i : rows[i]; }
};

inline int outcome_status(const Observation& o, Outcome outcome) {
  return outcome == Outcome::Event ? o.delta : 1 - o.delta;
}

struct CoxFeatureSpec {
  std::size_t num_covariates = 0;  // d; the design is [x_1..x_d, a]
};

struct CoxModel {
  std::vector<double> beta;    // length d + 1, last entry is the treatment coefficient
  std::vector<double> center;  // design means used for the baseline
  StepCurve baseline_cumhaz;   // Breslow, at the centered design
  CoxFeatureSpec feature_spec;
  std::size_t iterations = 0;
  double grad_norm = 0.0;

  double linear_predictor(std::span<const double> x, int a) const {
    require(x.size() == feature_spec.num_covariates, ErrorKind::InvalidInput, "covariate dimension mismatch");
    double lp = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) lp += beta[j] * (x[j] - center[j]);
    lp += beta.back() * (static_cast<double>(a) - center.back());
    return lp;
  }
};

namespace detail {

struct CoxDesign {
  std::size_t n = 0, p = 0;
  Eigen::MatrixXd x;            // n x p, centered, sorted by descending time
  std::vector<double> time;     // descending
  std::vector<int> status;
  std::vector<double> center;
  std::vector<bool> active;     // non-constant columns
};

inline CoxDesign make_cox_design(const RowView& view, Outcome outcome) {
  CoxDesign d;
  d.n = view.size();
  require(d.n > 0, ErrorKind::InvalidInput, "empty data for Cox fit");
  const std::size_t dim = view[0].x.size();
  d.p = dim + 1;
  std::vector<std::size_t> order(d.n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return view[i].y > view[j].y; });
  d.x.resize(static_cast<Eigen::Index>(d.n), static_cast<Eigen::Index>(d.p));
  d.time.resize(d.n);
  d.status.resize(d.n);
  for (std::size_t r = 0; r < d.n; ++r) {
    const auto& o = view[order[r]];
    require(o.x.size() == dim, ErrorKind::InvalidInput, "inconsistent covariate dimension");
    for (std::size_t j = 0; j < dim; ++j) d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = o.x[j];
    d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(dim)) = o.a;
    d.time[r] = o.y;
    d.status[r] = outcome_status(o, outcome);
  }
  d.center.resize(d.p);
  d.active.resize(d.p);
  for (std::size_t j = 0; j < d.p; ++j) {
    auto col = d.x.col(static_cast<Eigen::Index>(j));
    const double mean = col.mean();
    d.center[j] = mean;
    col.array() -= mean;
    const double scale = std::max(1.0, std::abs(mean));
    d.active[j] = col.cwiseAbs().maxCoeff() > 1e-12 * scale;
  }
  return d;
}

struct CoxEval {
  double loglik = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd info;  // negative Hessian
};

/// Breslow partial log-likelihood (divided by n) with gradient and information.
inline CoxEval cox_evaluate(const CoxDesign& d, const Eigen::VectorXd& beta, bool derivatives) {
  const auto p = static_cast<Eigen::Index>(d.p);
  CoxEval out;
  out.grad = Eigen::VectorXd::Zero(p);
  out.info = Eigen::MatrixXd::Zero(p, p);
  const Eigen::VectorXd lp = d.x * beta;
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t r = 0; r < d.n;) {
    const double t = d.time[r];
    std::size_t end = r;
    while (end < d.n && d.time[end] == t) {
      const auto e = static_cast<Eigen::Index>(end);
      const double w = std::exp(lp(e));
      s0 += w;
      if (derivatives) {
        s1.noalias() += w * d.x.row(e).transpose();
        s2.noalias() += w * d.x.row(e).transpose() * d.x.row(e);
      }
      ++end;
    }
    double events = 0.0;
    for (std::size_t k = r; k < end; ++k) {
      if (d.status[k] != 1) continue;
      const auto e = static_cast<Eigen::Index>(k);
      out.loglik += lp(e) - std::log(s0);
      events += 1.0;
      if (derivatives) out.grad.noalias() += d.x.row(e).transpose();
    }
    if (derivatives && events > 0.0) {
      const Eigen::VectorXd mean = s1 / s0;
      out.grad.noalias() -= events * mean;
      out.info.noalias() += events * (s2 / s0 - mean * mean.transpose());
    }
    r = end;
  }
  const double n = static_cast<double>(d.n);
  out.loglik /= n;
  out.grad /= n;
  out.info /= n;
  return out;
}

}  // namespace detail

/// Breslow partial log-likelihood (divided by n) at `beta` on the raw design [x, a].
inline double cox_partial_loglik(const RowView& view, Outcome outcome, std::span<const double> beta) {
  const auto d = detail::make_cox_design(view, outcome);
  require(beta.size() == d.p, ErrorKind::InvalidInput, "beta dimension mismatch");
  Eigen::VectorXd b(static_cast<Eigen::Index>(d.p));
  for (std::size_t j = 0; j < d.p; ++j) b(static_cast<Eigen::Index>(j)) = beta[j];
  return detail::cox_evaluate(d, b, false).loglik;
}

struct CoxOptions {
  std::size_t max_iterations = 100;
  double grad_tolerance = 1e-8;
  double max_abs_linear_predictor = 40.0;  // beyond this the likelihood is treated as monotone
};

inline CoxModel cox_fit(const RowView& view, Outcome outcome, std::optional<TimeGrid> grid = std::nullopt,
                        const CoxOptions& opt = {}) {
  auto d = detail::make_cox_design(view, outcome);
  const std::size_t events = static_cast<std::size_t>(std::count(d.status.begin(), d.status.end(), 1));
  if (events == 0) fail(ErrorKind::DegenerateFit, "no outcome events; fall back to marginal Kaplan-Meier");

  std::vector<Eigen::Index> cols;
  for (std::size_t j = 0; j < d.p; ++j)
    if (d.active[j]) cols.push_back(static_cast<Eigen::Index>(j));
  const auto q = static_cast<Eigen::Index>(cols.size());

  detail::CoxDesign reduced;
  reduced.n = d.n;
  reduced.p = cols.size();
  reduced.time = d.time;
  reduced.status = d.status;
  reduced.x.resize(static_cast<Eigen::Index>(d.n), q);
  for (Eigen::Index c = 0; c < q; ++c) reduced.x.col(c) = d.x.col(cols[static_cast<std::size_t>(c)]);

  if (q > 0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(reduced.x);
    qr.setThreshold(1e-10);
    if (qr.rank() < q) fail(ErrorKind::SingularDesign, "rank-deficient Cox design");
  }

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(q);
  auto eval = detail::cox_evaluate(reduced, beta, true);
  std::size_t iter = 0;
  auto sup = [](const Eigen::VectorXd& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); };
  while (sup(eval.grad) >= opt.grad_tolerance) {
    if (iter >= opt.max_iterations) {
      throw NonConvergenceError("Cox Newton did not converge", std::vector<double>(beta.data(), beta.data() + q),
                                sup(eval.grad));
    }
    ++iter;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(eval.info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0.0) {
      throw NonConvergenceError("singular Cox information matrix", std::vector<double>(beta.data(), beta.data() + q),
                                sup(eval.grad));
    }
    const Eigen::VectorXd step = ldlt.solve(eval.grad);
    double scale = 1.0;
    detail::CoxEval next;
    Eigen::VectorXd candidate;
    for (int halving = 0; halving < 40; ++halving) {
      candidate = beta + scale * step;
      next = detail::cox_evaluate(reduced, candidate, true);
      if (std::isfinite(next.loglik) && next.loglik >= eval.loglik - 1e-15 * (1.0 + std::abs(eval.loglik))) break;
      scale *= 0.5;
    }
    beta = candidate;
    eval = std::move(next);
    if ((reduced.x * beta).cwiseAbs().maxCoeff() > opt.max_abs_linear_predictor) {
      throw NonConvergenceError("monotone partial likelihood (coefficients diverge)",
                                std::vector<double>(beta.data(), beta.data() + q), sup(eval.grad));
    }
  }

  CoxModel model;
  model.beta.assign(d.p, 0.0);
  for (Eigen::Index c = 0; c < q; ++c) model.beta[static_cast<std::size_t>(cols[static_cast<std::size_t>(c)])] = beta(c);
  model.center = d.center;
  model.feature_spec.num_covariates = d.p - 1;
  model.iterations = iter;
  model.grad_norm = sup(eval.grad);

  // Breslow baseline at the centered design.
  const Eigen::VectorXd lp = reduced.x * beta;
  std::vector<detail::RiskSetStep> steps;
  double s0 = 0.0;
  for (std::size_t r = 0; r < d.n;) {
    const double t = d.time[r];
    std::size_t end = r;
    double ev = 0.0;
    while (end < d.n && d.time[end] == t) {
      s0 += std::exp(lp(static_cast<Eigen::Index>(end)));
      if (d.status[end] == 1) ev += 1.0;
      ++end;
    }
    if (ev > 0.0) steps.push_back({t, ev, s0});
    r = end;
  }
  std::reverse(steps.begin(), steps.end());
  if (!grid) {
    std::vector<double> times(d.time.begin(), d.time.end());
    grid = TimeGrid::from_times(times);
  }
  model.baseline_cumhaz = StepCurve{*grid, {}, CurveKind::CumHazard};
  detail::accumulate_on_grid(
      steps, *grid, 0.0, [](const detail::RiskSetStep& s) { return s.events / s.at_risk; },
      [](double acc, double f) { return acc + f; }, model.baseline_cumhaz.values);
  return model;
}

/// S(t | a, x) = exp(-Lambda0(t) exp(lp)) evaluated on the model's grid (or `grid`).
inline void predict_conditional_survival(const CoxModel& model, std::span<const double> x, int a,
                                         std::span<double> out) {
  require(out.size() == model.baseline_cumhaz.values.size(), ErrorKind::InvalidInput, "output size mismatch");
  const double risk = std::exp(model.linear_predictor(x, a));
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = std::exp(-model.baseline_cumhaz.values[g] * risk);
}

inline StepCurve predict_conditional_survival(const CoxModel& model, std::span<const double> x, int a,
                                              std::optional<TimeGrid> grid = std::nullopt) {
  const CoxModel* m = &model;
  CoxModel resampled;
  if (grid && !(*grid == model.baseline_cumhaz.grid)) {
    resampled = model;
    resampled.baseline_cumhaz = model.baseline_cumhaz.resample(*grid);
    m = &resampled;
  }
  StepCurve out{m->baseline_cumhaz.grid, std::vector<double>(m->baseline_cumhaz.values.size()), CurveKind::Survival};
  predict_conditional_survival(*m, x, a, out.values);
  return out;
}

}  // namespace fedsurv
