#pragma once

// Discrete super learner for conditional survival: marginal KM, treatment-
// stratified KM and Cox on (x, a), selected by cross-validated IPCW Brier score.

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fedsurv/rng.hpp"
#include "fedsurv/survcore/cox.hpp"
#include "fedsurv/survcore/nonparametric.hpp"

namespace fedsurv {

enum class SurvivalLearner { MarginalKM, StratifiedKM, Cox };

inline std::string_view to_string(SurvivalLearner l) {
  switch (l) {
    case SurvivalLearner::MarginalKM: return "km";
    case SurvivalLearner::StratifiedKM: return "stratified_km";
    case SurvivalLearner::Cox: return "cox";
  }
  return "?";
}

inline SurvivalLearner learner_from_string(std::string_view s) {
  if (s == "km") return SurvivalLearner::MarginalKM;
  if (s == "stratified_km") return SurvivalLearner::StratifiedKM;
  if (s == "cox") return SurvivalLearner::Cox;
  fail(ErrorKind::InvalidInput, "unknown survival learner '" + std::string(s) + "'");
}

struct SurvivalModel {
  SurvivalLearner kind = SurvivalLearner::MarginalKM;
  Outcome outcome = Outcome::Event;
  TimeGrid grid;
  std::vector<double> marginal;               // marginal KM on grid
  std::array<std::vector<double>, 2> strata;  // per-arm KM; empty arm falls back to marginal
  std::optional<CoxModel> cox;
  bool degenerate = false;  // no outcome events in training data
  std::vector<std::pair<SurvivalLearner, double>> cv_scores;

  /// Conditional survival of the selected outcome on the grid.
  void predict(std::span<const double> x, int a, std::span<double> out) const {
    require(out.size() == grid.size(), ErrorKind::InvalidInput, "prediction buffer size mismatch");
    switch (kind) {
      case SurvivalLearner::MarginalKM:
        std::copy(marginal.begin(), marginal.end(), out.begin());
        return;
      case SurvivalLearner::StratifiedKM: {
        const auto& s = strata[static_cast<std::size_t>(a)];
        std::copy(s.begin(), s.end(), out.begin());
        return;
      }
      case SurvivalLearner::Cox:
        predict_conditional_survival(*cox, x, a, out);
        return;
    }
  }

  std::vector<double> predict(std::span<const double> x, int a) const {
    std::vector<double> out(grid.size());
    predict(x, a, out);
    return out;
  }
};

struct EnsembleOptions {
  std::size_t cv_folds = 5;
  std::vector<SurvivalLearner> candidates{SurvivalLearner::MarginalKM, SurvivalLearner::StratifiedKM,
                                          SurvivalLearner::Cox};
  double brier_censoring_floor = 0.1;  // grid points where the censoring KM is below this are not scored
};

namespace detail {

inline std::vector<TimeEvent> outcome_events(const RowView& view, Outcome outcome, int arm = -1) {
  std::vector<TimeEvent> ev;
  ev.reserve(view.size());
  for (std::size_t i = 0; i < view.size(); ++i) {
    const auto& o = view[i];
    if (arm >= 0 && o.a != arm) continue;
    ev.push_back({o.y, outcome_status(o, outcome)});
  }
  return ev;
}

/// Fits one candidate; throws if the candidate cannot be fitted on this data.
inline SurvivalModel fit_candidate(const RowView& view, Outcome outcome, const TimeGrid& grid, SurvivalLearner kind) {
  SurvivalModel m;
  m.kind = kind;
  m.outcome = outcome;
  m.grid = grid;
  const auto all = outcome_events(view, outcome);
  m.marginal = km_fit(all, {}, grid).values;
  if (kind == SurvivalLearner::StratifiedKM) {
    for (int a = 0; a < 2; ++a) {
      const auto ev = outcome_events(view, outcome, a);
      m.strata[static_cast<std::size_t>(a)] = ev.empty() ? m.marginal : km_fit(ev, {}, grid).values;
    }
  } else if (kind == SurvivalLearner::Cox) {
    m.cox = cox_fit(view, outcome, grid);
  }
  return m;
}

/// IPCW Brier score of `model` on validation rows, integrated over grid points
/// where the training censoring survival stays above `floor`.
inline double ipcw_brier(const SurvivalModel& model, const RowView& valid, const std::vector<double>& cens,
                         const TimeGrid& grid, double floor) {
  std::size_t last = 0;
  for (std::size_t g = 1; g < grid.size(); ++g)
    if (cens[g] >= floor) last = g;
  if (last == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> pred(grid.size());
  double total = 0.0;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    const auto& o = valid[i];
    model.predict(o.x, o.a, pred);
    const int status = outcome_status(o, model.outcome);
    const std::size_t yi = std::min(grid.ceil_index(o.y), grid.size());
    const double g_y = std::max(cens[yi == 0 ? 0 : yi - 1], floor);  // censoring survival just before y
    for (std::size_t g = 1; g <= last; ++g) {
      if (o.y > grid[g]) {
        const double r = 1.0 - pred[g];
        total += r * r / std::max(cens[g], floor);
      } else if (status == 1) {
        total += pred[g] * pred[g] / g_y;
      }
    }
  }
  return total / (static_cast<double>(valid.size()) * static_cast<double>(last));
}

}  // namespace detail

/// Discrete super learner. Falls back to marginal KM (flagged) when there are no outcome events.
inline SurvivalModel fit_survival_ensemble(const RowView& train, Outcome outcome, const TimeGrid& grid,
                                           const EnsembleOptions& opt = {}, std::uint64_t seed = 0) {
  require(train.size() > 0, ErrorKind::InvalidInput, "empty survival training set");
  require(!opt.candidates.empty(), ErrorKind::InvalidInput, "no survival candidates configured");
  std::size_t events = 0;
  for (std::size_t i = 0; i < train.size(); ++i) events += static_cast<std::size_t>(outcome_status(train[i], outcome));
  if (events == 0) {
    auto m = detail::fit_candidate(train, outcome, grid, SurvivalLearner::MarginalKM);
    m.degenerate = true;
    return m;
  }

  std::vector<double> score(opt.candidates.size(), 0.0);
  const bool run_cv = opt.candidates.size() > 1 && opt.cv_folds >= 2 && train.size() >= 2 * opt.cv_folds;
  if (run_cv) {
    std::vector<std::size_t> perm(train.size());
    std::iota(perm.begin(), perm.end(), 0);
    auto eng = make_engine(seed, "ensemble_cv");
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[eng() % i]);
    const Outcome other = outcome == Outcome::Event ? Outcome::Censoring : Outcome::Event;
    std::vector<std::size_t> weight(opt.candidates.size(), 0);
    for (std::size_t v = 0; v < opt.cv_folds; ++v) {
      std::vector<std::size_t> tr, va;
      for (std::size_t i = 0; i < perm.size(); ++i) (i % opt.cv_folds == v ? va : tr).push_back(train.row_id(perm[i]));
      std::sort(tr.begin(), tr.end());
      std::sort(va.begin(), va.end());
      RowView tv(*train.data, tr), vv(*train.data, va);
      const auto cens = km_fit(detail::outcome_events(tv, other), {}, grid).values;
      for (std::size_t c = 0; c < opt.candidates.size(); ++c) {
        double s = std::numeric_limits<double>::infinity();
        try {
          const auto m = detail::fit_candidate(tv, outcome, grid, opt.candidates[c]);
          s = detail::ipcw_brier(m, vv, cens, grid, opt.brier_censoring_floor);
        } catch (const Error&) {
        }
        if (std::isnan(s)) continue;
        score[c] += s;
        ++weight[c];
      }
    }
    for (std::size_t c = 0; c < score.size(); ++c)
      score[c] = weight[c] == opt.cv_folds ? score[c] / static_cast<double>(weight[c])
                                           : std::numeric_limits<double>::infinity();
  }

  std::vector<std::size_t> order(opt.candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return score[i] < score[j]; });
  for (std::size_t c : order) {
    try {
      auto m = detail::fit_candidate(train, outcome, grid, opt.candidates[c]);
      for (std::size_t k = 0; k < opt.candidates.size(); ++k)
        if (run_cv) m.cv_scores.emplace_back(opt.candidates[k], score[k]);
      return m;
    } catch (const Error&) {
    }
  }
  return detail::fit_candidate(train, outcome, grid, SurvivalLearner::MarginalKM);
}

}  // namespace fedsurv
