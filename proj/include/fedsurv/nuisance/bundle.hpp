#pragma once

// Cross-fitted nuisance predictions for every observation, with provenance
// records proving that no row is predicted by a model that saw its fold.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedsurv/nuisance/density_ratio.hpp"
#include "fedsurv/nuisance/ensemble.hpp"
#include "fedsurv/nuisance/folds.hpp"
#include "fedsurv/nuisance/propensity.hpp"

namespace fedsurv {

enum class BundleMode { Federated, CCOD };
enum class Sharing { Pooled, CoarseOnly };

inline std::string_view to_string(Sharing s) { return s == Sharing::Pooled ? "pooled" : "coarse"; }

inline Sharing sharing_from_string(std::string_view s) {
  if (s == "pooled") return Sharing::Pooled;
  if (s == "coarse") return Sharing::CoarseOnly;
  fail(ErrorKind::InvalidInput, "unknown sharing mode '" + std::string(s) + "'");
}

/// Nuisances tracked by the provenance audit.
enum class Nuisance : int { STarget, GOwn, SOwn, PiOwn, Omega, SBar, GBar, PiBar, Q0 };
inline constexpr std::size_t kNumNuisances = 9;

inline std::string_view to_string(Nuisance n) {
  static constexpr std::array<std::string_view, kNumNuisances> names{"s_target", "g_own", "s_own", "pi_own", "omega",
                                                                      "s_bar",    "g_bar", "pi_bar", "q0"};
  return names[static_cast<std::size_t>(n)];
}

/// Per-row, per-arm curves on the grid.
struct CurveBlock {
  std::size_t grid_size = 0;
  std::vector<double> values;  // [row][arm][g]

  void allocate(std::size_t rows, std::size_t g, double fill = 1.0) {
    grid_size = g;
    values.assign(rows * 2 * g, fill);
  }
  bool empty() const { return values.empty(); }
  std::span<double> at(std::size_t row, int a) {
    return {values.data() + (row * 2 + static_cast<std::size_t>(a)) * grid_size, grid_size};
  }
  std::span<const double> at(std::size_t row, int a) const {
    return {values.data() + (row * 2 + static_cast<std::size_t>(a)) * grid_size, grid_size};
  }
};

struct ModelRecord {
  Nuisance nuisance;
  int site;   // -1 for pooled models
  int fold;   // -1 for full-data models
  std::string learner;
  std::vector<std::size_t> training_rows;
};

struct ClipCount {
  std::size_t clipped = 0;
  std::size_t total = 0;
  double fraction() const { return total ? static_cast<double>(clipped) / static_cast<double>(total) : 0.0; }
};

struct NuisanceBundle {
  TimeGrid grid;
  int num_sites = 0;
  std::size_t n = 0;
  double eta_cap = 20.0;
  bool federated = false;
  bool pooled = false;

  // federated parts
  CurveBlock s_target;          // target rows: cross-fitted S0; source rows: full-target S0 model
  CurveBlock g_own;             // own-site censoring survival
  CurveBlock s_own;             // own-site outcome survival (per-site unadjusted estimators)
  std::vector<double> pi_own;   // own-site P(A=1 | x), clipped to [1/cap, 1 - 1/cap]
  std::vector<double> omega;    // omega^{R_i,0}(x_i); 1 on target rows; empty when K = 1
  // pooled parts
  CurveBlock s_bar, g_bar;
  std::vector<double> pi_bar;
  std::vector<double> q0;       // P(R = 0 | x) from pooled data; empty when K = 1

  std::optional<SurvivalModel> s0_full;
  std::vector<ModelRecord> models;
  std::array<std::vector<int>, kNumNuisances> provenance;  // model id per row, -1 if not predicted
  std::array<ClipCount, kNumNuisances> clips;
  std::size_t survival_floor_events = 0;
  std::vector<std::string> warnings;

  double pi(std::size_t i, int a, bool pooled_model = false) const {
    const double p1 = pooled_model ? pi_bar[i] : pi_own[i];
    return a == 1 ? p1 : 1.0 - p1;
  }

  void allocate(std::size_t rows, const TimeGrid& g, int sites, bool with_federated, bool with_pooled,
                bool with_own_survival = true) {
    grid = g;
    n = rows;
    num_sites = sites;
    federated = with_federated;
    pooled = with_pooled;
    if (with_federated) {
      s_target.allocate(rows, g.size());
      g_own.allocate(rows, g.size());
      if (with_own_survival) s_own.allocate(rows, g.size());
      pi_own.assign(rows, 0.5);
      if (sites > 1) omega.assign(rows, 1.0);
    }
    if (with_pooled) {
      s_bar.allocate(rows, g.size());
      g_bar.allocate(rows, g.size());
      pi_bar.assign(rows, 0.5);
      if (sites > 1) q0.assign(rows, 1.0);
    }
    for (auto& p : provenance) p.assign(rows, -1);
  }
};

struct BundleOptions {
  Sharing sharing = Sharing::CoarseOnly;
  double eta_cap = 20.0;
  EnsembleOptions ensemble;
  bool own_site_survival = true;
};

namespace detail {

inline std::uint64_t nuisance_seed(std::uint64_t seed, Nuisance role, int site, int fold) {
  // pooled models share the target's stream so a single-site run reproduces it exactly
  return derive_seed(seed, "nuisance", {static_cast<std::uint64_t>(role), static_cast<std::uint64_t>(site + 1),
                                        static_cast<std::uint64_t>(fold + 1)});
}

inline int record_model(NuisanceBundle& b, Nuisance nuis, int site, int fold, std::string learner,
                        std::vector<std::size_t> rows) {
  b.models.push_back({nuis, site, fold, std::move(learner), std::move(rows)});
  return static_cast<int>(b.models.size()) - 1;
}

inline void predict_survival_rows(NuisanceBundle& b, CurveBlock& block, const SurvivalModel& model,
                                  const Dataset& data, std::span<const std::size_t> rows, Nuisance nuis, int model_id,
                                  bool censoring) {
  auto& cc = b.clips[static_cast<std::size_t>(nuis)];
  const double lo = 1.0 / b.eta_cap;
  for (std::size_t i : rows) {
    for (int a = 0; a < 2; ++a) {
      auto out = block.at(i, a);
      model.predict(data[i].x, a, out);
      for (double& v : out) {
        ++cc.total;
        if (censoring) {
          if (v < lo) v = lo, ++cc.clipped;
          if (v > 1.0) v = 1.0;
        } else {
          if (v < kSurvivalFloor) v = kSurvivalFloor, ++b.survival_floor_events;
          if (v > 1.0) v = 1.0;
        }
      }
    }
    b.provenance[static_cast<std::size_t>(nuis)][i] = model_id;
  }
}

inline double clip_propensity(NuisanceBundle& b, Nuisance nuis, double p) {
  auto& cc = b.clips[static_cast<std::size_t>(nuis)];
  const double lo = 1.0 / b.eta_cap;
  ++cc.total;
  if (p < lo || p > 1.0 - lo) ++cc.clipped;
  return std::clamp(p, lo, 1.0 - lo);
}

inline std::string survival_tag(const SurvivalModel& m) { return std::string(to_string(m.kind)); }

}  // namespace detail

/// Target-site inputs a source site needs for its density ratio.
struct RatioReference {
  std::optional<SiteCovariateSummary> target_summary;  // CoarseOnly
  const Dataset* target_data = nullptr;                // Pooled: target rows of `target_folds`
  const FoldAssignment* target_folds = nullptr;
};

/// Cross-fitted S0 on target rows plus the full-target S0 model (returned).
inline SurvivalModel fit_target_survival(const Dataset& data, const FoldAssignment& folds, const BundleOptions& opt,
                                         std::uint64_t seed, NuisanceBundle& b) {
  const auto& tf = folds.site_folds.at(0);
  for (std::size_t m = 0; m < folds.M; ++m) {
    auto tr = folds.training_rows(0, m);
    const auto model = fit_survival_ensemble(RowView(data, tr), Outcome::Event, b.grid, opt.ensemble,
                                             detail::nuisance_seed(seed, Nuisance::STarget, 0, static_cast<int>(m)));
    const int id = detail::record_model(b, Nuisance::STarget, 0, static_cast<int>(m), detail::survival_tag(model), tr);
    detail::predict_survival_rows(b, b.s_target, model, data, tf[m], Nuisance::STarget, id, false);
  }
  std::vector<std::size_t> all;
  for (const auto& f : tf) all.insert(all.end(), f.begin(), f.end());
  std::sort(all.begin(), all.end());
  auto full = fit_survival_ensemble(RowView(data, all), Outcome::Event, b.grid, opt.ensemble,
                                    detail::nuisance_seed(seed, Nuisance::STarget, 0, -1));
  detail::record_model(b, Nuisance::STarget, 0, -1, detail::survival_tag(full), all);
  return full;
}

/// Own-site G, pi (and optionally S) cross-fitted on site k; for k >= 1 also the
/// transported S prediction from `s0_full` and the density ratio per fold.
inline void fit_site_nuisance(const Dataset& data, const FoldAssignment& folds, int k, const SurvivalModel* s0_full,
                              const RatioReference& ref, const BundleOptions& opt, std::uint64_t seed,
                              NuisanceBundle& b) {
  const auto& sf = folds.site_folds.at(static_cast<std::size_t>(k));
  std::size_t size = 0;
  for (const auto& f : sf) size += f.size();
  require(size > 0, ErrorKind::EmptySite, "site " + std::to_string(k) + " has no observations");
  require(size >= 2 * folds.M, ErrorKind::InvalidFoldCount, "site " + std::to_string(k) + " smaller than 2M");
  const std::string ctx = " (site " + std::to_string(k) + ")";

  for (std::size_t m = 0; m < folds.M; ++m) {
    const int fm = static_cast<int>(m);
    auto tr = folds.training_rows(k, m);
    const RowView tv(data, tr);
    try {
      const auto gm = fit_survival_ensemble(tv, Outcome::Censoring, b.grid, opt.ensemble,
                                            detail::nuisance_seed(seed, Nuisance::GOwn, k, fm));
      int id = detail::record_model(b, Nuisance::GOwn, k, fm, detail::survival_tag(gm), tr);
      detail::predict_survival_rows(b, b.g_own, gm, data, sf[m], Nuisance::GOwn, id, true);

      const auto pm = fit_propensity(tv);
      if (pm.flagged())
        b.warnings.push_back("propensity flagged (" + std::string(pm.degenerate ? "one arm absent" : "separation") +
                             ") site " + std::to_string(k) + " fold " + std::to_string(m));
      id = detail::record_model(b, Nuisance::PiOwn, k, fm, "logistic", tr);
      for (std::size_t i : sf[m]) {
        b.pi_own[i] = detail::clip_propensity(b, Nuisance::PiOwn, pm.predict(data[i].x));
        b.provenance[static_cast<std::size_t>(Nuisance::PiOwn)][i] = id;
      }

      if (k == 0) continue;
      if (!b.s_own.empty()) {
        const auto sm = fit_survival_ensemble(tv, Outcome::Event, b.grid, opt.ensemble,
                                              detail::nuisance_seed(seed, Nuisance::STarget, k, fm));
        id = detail::record_model(b, Nuisance::SOwn, k, fm, detail::survival_tag(sm), tr);
        detail::predict_survival_rows(b, b.s_own, sm, data, sf[m], Nuisance::SOwn, id, false);
      }

      RatioModel ratio;
      std::vector<std::size_t> ratio_rows = tr;
      try {
        if (opt.sharing == Sharing::CoarseOnly) {
          require(ref.target_summary.has_value(), ErrorKind::InvalidInput, "coarse sharing needs a target summary");
          ratio = fit_density_ratio_coarse(*ref.target_summary, summarize_covariates(tv, k), opt.eta_cap);
        } else {
          require(ref.target_data && ref.target_folds, ErrorKind::InvalidInput, "pooled sharing needs target rows");
          auto ttr = ref.target_folds->training_rows(0, m);
          ratio = fit_density_ratio_pooled(covariate_matrix(RowView(*ref.target_data, ttr)), covariate_matrix(tv),
                                           opt.eta_cap);
          if (ref.target_data == &data) ratio_rows.insert(ratio_rows.end(), ttr.begin(), ttr.end());
        }
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::CoarseRatioFailure) throw;
        ratio = RatioModel::identity(data[sf[m].front()].x.size(), opt.eta_cap);
        ratio.fallback = true;
        b.warnings.push_back(std::string(e.what()) + "; using omega = 1 for fold " + std::to_string(m));
      }
      std::sort(ratio_rows.begin(), ratio_rows.end());
      id = detail::record_model(b, Nuisance::Omega, k, fm, to_string(opt.sharing).data(), std::move(ratio_rows));
      auto& cc = b.clips[static_cast<std::size_t>(Nuisance::Omega)];
      for (std::size_t i : sf[m]) {
        const double w = ratio.unclipped(data[i].x);
        ++cc.total;
        if (w < 1.0 / opt.eta_cap || w > opt.eta_cap) ++cc.clipped;
        b.omega[i] = ratio(data[i].x);
        b.provenance[static_cast<std::size_t>(Nuisance::Omega)][i] = id;
      }
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::InvalidInput || e.kind() == ErrorKind::EmptySite) throw;
      throw Error(e.kind(), e.message() + ctx + " fold " + std::to_string(m));
    }
  }

  if (k > 0) {
    require(s0_full != nullptr, ErrorKind::InvalidInput, "source sites need the full-target survival model");
    const int id = static_cast<int>(std::find_if(b.models.begin(), b.models.end(), [](const ModelRecord& r) {
                                      return r.nuisance == Nuisance::STarget && r.fold == -1;
                                    }) - b.models.begin());
    const int use = id < static_cast<int>(b.models.size()) ? id
                                                           : detail::record_model(b, Nuisance::STarget, 0, -1,
                                                                                  detail::survival_tag(*s0_full), {});
    for (const auto& f : sf) detail::predict_survival_rows(b, b.s_target, *s0_full, data, f, Nuisance::STarget, use, false);
  } else if (!b.s_own.empty()) {
    for (const auto& f : sf)
      for (std::size_t i : f) {
        for (int a = 0; a < 2; ++a) std::copy(b.s_target.at(i, a).begin(), b.s_target.at(i, a).end(), b.s_own.at(i, a).begin());
        b.provenance[static_cast<std::size_t>(Nuisance::SOwn)][i] = b.provenance[static_cast<std::size_t>(Nuisance::STarget)][i];
      }
  }
}

/// Pooled nuisances for the common-conditional-outcome estimator and for naive pooling.
inline void fit_pooled_nuisance(const Dataset& data, const FoldAssignment& folds, const BundleOptions& opt,
                                std::uint64_t seed, NuisanceBundle& b) {
  for (std::size_t m = 0; m < folds.M; ++m) {
    const int fm = static_cast<int>(m);
    auto tr = folds.pooled_training_rows(m);
    std::vector<std::size_t> va;
    for (const auto& sf : folds.site_folds) va.insert(va.end(), sf[m].begin(), sf[m].end());
    std::sort(va.begin(), va.end());
    const RowView tv(data, tr);

    const auto sm = fit_survival_ensemble(tv, Outcome::Event, b.grid, opt.ensemble,
                                          detail::nuisance_seed(seed, Nuisance::STarget, 0, fm));
    int id = detail::record_model(b, Nuisance::SBar, -1, fm, detail::survival_tag(sm), tr);
    detail::predict_survival_rows(b, b.s_bar, sm, data, va, Nuisance::SBar, id, false);

    const auto gm = fit_survival_ensemble(tv, Outcome::Censoring, b.grid, opt.ensemble,
                                          detail::nuisance_seed(seed, Nuisance::GOwn, 0, fm));
    id = detail::record_model(b, Nuisance::GBar, -1, fm, detail::survival_tag(gm), tr);
    detail::predict_survival_rows(b, b.g_bar, gm, data, va, Nuisance::GBar, id, true);

    const auto pm = fit_propensity(tv);
    id = detail::record_model(b, Nuisance::PiBar, -1, fm, "logistic", tr);
    for (std::size_t i : va) {
      b.pi_bar[i] = detail::clip_propensity(b, Nuisance::PiBar, pm.predict(data[i].x));
      b.provenance[static_cast<std::size_t>(Nuisance::PiBar)][i] = id;
    }

    if (b.q0.empty()) continue;
    std::vector<double> label(tr.size());
    for (std::size_t j = 0; j < tr.size(); ++j) label[j] = data[tr[j]].r == 0 ? 1.0 : 0.0;
    const auto qm = fit_logistic(covariate_matrix(tv), label);
    id = detail::record_model(b, Nuisance::Q0, -1, fm, "logistic", tr);
    auto& cc = b.clips[static_cast<std::size_t>(Nuisance::Q0)];
    for (std::size_t i : va) {
      b.q0[i] = std::clamp(qm.predict(data[i].x), 0.0, 1.0);
      ++cc.total;
      b.provenance[static_cast<std::size_t>(Nuisance::Q0)][i] = id;
    }
  }
}

/// Builds the federated and/or pooled nuisance parts over all sites.
inline NuisanceBundle build_nuisance_bundle(const Dataset& data, const FoldAssignment& folds, const TimeGrid& grid,
                                            bool federated, bool pooled, const BundleOptions& opt,
                                            std::uint64_t seed) {
  require(!data.empty(), ErrorKind::InvalidInput, "empty dataset");
  const int K = num_sites(data);
  require(static_cast<int>(folds.num_sites()) == K && folds.fold_of_row.size() == data.size(),
          ErrorKind::InvalidInput, "fold assignment does not match the data");
  for (int k = 0; k < K; ++k) {
    std::size_t size = 0;
    for (const auto& f : folds.site_folds[static_cast<std::size_t>(k)]) size += f.size();
    if (k == 0) require(size > 0, ErrorKind::EmptyTarget, "target site has no observations");
    require(size >= 2 * folds.M, ErrorKind::InvalidFoldCount,
            "site " + std::to_string(k) + " has " + std::to_string(size) + " rows, fewer than 2M");
  }
  NuisanceBundle b;
  b.eta_cap = opt.eta_cap;
  b.allocate(data.size(), grid, K, federated, pooled, opt.own_site_survival);
  if (federated) {
    auto full = fit_target_survival(data, folds, opt, seed, b);
    RatioReference ref;
    if (opt.sharing == Sharing::CoarseOnly) {
      auto target_rows = folds.training_rows(0, folds.M);  // no fold M exists, so this is every target row
      ref.target_summary = summarize_covariates(RowView(data, target_rows), 0);
    } else {
      ref.target_data = &data;
      ref.target_folds = &folds;
    }
    for (int k = 0; k < K; ++k) fit_site_nuisance(data, folds, k, &full, ref, opt, seed, b);
    b.s0_full = std::move(full);
  }
  if (pooled) fit_pooled_nuisance(data, folds, opt, seed, b);
  return b;
}

inline NuisanceBundle build_nuisance_bundle(const Dataset& data, const FoldAssignment& folds, const TimeGrid& grid,
                                            BundleMode mode, const BundleOptions& opt, std::uint64_t seed) {
  if (mode == BundleMode::CCOD)
    require(opt.sharing == Sharing::Pooled, ErrorKind::InvalidInput, "CCOD mode needs pooled individual data");
  return build_nuisance_bundle(data, folds, grid, mode == BundleMode::Federated, mode == BundleMode::CCOD, opt, seed);
}

/// Cross-fitting audit: no row is predicted by a model whose training set holds a
/// row of the same site and validation fold. Returns the violations found.
inline std::vector<std::string> audit_cross_fitting(const NuisanceBundle& b, const Dataset& data,
                                                    const FoldAssignment& folds) {
  std::vector<std::string> bad;
  for (std::size_t k = 0; k < kNumNuisances; ++k) {
    for (std::size_t i = 0; i < b.provenance[k].size(); ++i) {
      const int id = b.provenance[k][i];
      if (id < 0) continue;
      const auto& rec = b.models[static_cast<std::size_t>(id)];
      for (std::size_t r : rec.training_rows) {
        if (data[r].r == data[i].r && folds.fold_of_row[r] == folds.fold_of_row[i]) {
          bad.push_back(std::string(to_string(static_cast<Nuisance>(k))) + ": row " + std::to_string(i) +
                        " shares its fold with training row " + std::to_string(r));
          break;
        }
      }
    }
  }
  return bad;
}

}  // namespace fedsurv
