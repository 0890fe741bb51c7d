#pragma once

// Monte Carlo runner and the bias / RRMSE / CI width / coverage summary.

#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "fedsurv/simbench/competitors.hpp"
#include "fedsurv/simbench/dgp.hpp"
#include "fedsurv/simbench/truth.hpp"
#include "fedsurv/survcore/csv.hpp"

namespace fedsurv {

struct MonteCarloConfig {
  ScenarioSpec spec;
  std::size_t reps = 200;
  std::vector<double> eval_times{30.0, 60.0, 90.0};
  std::size_t n_super = 1000000;
  double tau = 200.0;
  double step = 1.0;
  std::uint64_t seed = 0;
  EstimationConfig estimation;
  double max_failure_fraction = 0.02;
};

inline std::uint64_t replicate_seed(std::uint64_t seed, std::size_t rep) {
  return derive_seed(seed, "replicate", {static_cast<std::uint64_t>(rep)});
}

struct RepRecord {
  Method method;
  double t;
  int a;
  std::size_t rep;
  EstimateWithCI estimate;
  double truth;
};

struct MetricRow {
  Method method;
  double t;
  int a;
  std::size_t reps = 0;
  double bias = 0.0, rmse = 0.0, rrmse = 0.0, ci_width = 0.0, cp = 0.0;
};

struct MetricsReport {
  Scenario scenario = Scenario::Homogeneous;
  std::size_t n_source = 0;
  std::size_t reps_requested = 0, reps_completed = 0;
  std::vector<RepRecord> records;
  std::vector<MetricRow> summary;
  std::vector<std::string> failures;  // replicate- or method-level
  std::size_t failed_reps = 0;
  bool interrupted = false;
  std::map<std::pair<double, int>, double> truth, truth_se;
  /// Mean target weight per (t, a) and site, across replicates (FED).
  std::map<std::pair<double, int>, std::vector<double>> mean_weights;

  const MetricRow& row(Method m, double t, int a) const {
    for (const auto& r : summary)
      if (r.method == m && r.t == t && r.a == a) return r;
    fail(ErrorKind::InvalidInput, "no summary row for " + to_string(m));
  }
  bool degraded() const { return failed_reps > 0 || !failures.empty() || interrupted; }
};

/// Aggregates replicate records into the per-(method, t, a) summary; RRMSE is relative to TGT.
inline std::vector<MetricRow> summarize(const std::vector<RepRecord>& records, const std::vector<double>& times) {
  std::vector<MetricRow> out;
  std::map<std::pair<double, int>, double> tgt_rmse;
  for (Method m : kAllMethods)
    for (double t : times)
      for (int a = 0; a < 2; ++a) {
        MetricRow row{m, t, a};
        double se2 = 0.0;
        for (const auto& r : records) {
          if (r.method != m || r.t != t || r.a != a) continue;
          const double d = r.estimate.theta - r.truth;
          ++row.reps;
          row.bias += d;
          se2 += d * d;
          row.ci_width += r.estimate.ci_hi - r.estimate.ci_lo;
          row.cp += (r.estimate.ci_lo <= r.truth && r.truth <= r.estimate.ci_hi) ? 1.0 : 0.0;
        }
        if (row.reps > 0) {
          const double k = static_cast<double>(row.reps);
          row.bias /= k;
          row.rmse = std::sqrt(se2 / k);
          row.ci_width /= k;
          row.cp = 100.0 * row.cp / k;
        }
        if (m == Method::TGT) tgt_rmse[{t, a}] = row.rmse;
        out.push_back(row);
      }
  for (auto& row : out) {
    const double base = tgt_rmse[{row.t, row.a}];
    row.rrmse = base > 0.0 ? row.rmse / base : (row.rmse == 0.0 ? 1.0 : INFINITY);
  }
  return out;
}

using ReplicateHook = std::function<void(std::size_t rep, const Dataset&, const CompetitorResult&)>;

inline MetricsReport monte_carlo(const MonteCarloConfig& cfg, const std::atomic<bool>* stop = nullptr,
                                 const ReplicateHook& hook = {}) {
  require(cfg.reps >= 1, ErrorKind::InvalidInput, "reps must be at least 1");
  const auto grid = TimeGrid::regular(cfg.tau, cfg.step);
  MetricsReport rep;
  rep.scenario = cfg.spec.scenario;
  rep.n_source = cfg.spec.n_source;
  rep.reps_requested = cfg.reps;
  TruthCurve truth[2] = {truth_oracle(cfg.spec, grid, 0, cfg.n_super, cfg.seed),
                         truth_oracle(cfg.spec, grid, 1, cfg.n_super, cfg.seed)};
  for (double t : cfg.eval_times)
    for (int a = 0; a < 2; ++a) {
      rep.truth[{t, a}] = truth[a].curve.values[grid.index_of(t)];
      rep.truth_se[{t, a}] = truth[a].se[grid.index_of(t)];
    }
  std::map<std::pair<double, int>, std::size_t> weight_count;
  for (std::size_t r = 0; r < cfg.reps; ++r) {
    if (stop && stop->load()) {
      rep.interrupted = true;
      break;
    }
    const auto s = replicate_seed(cfg.seed, r);
    try {
      const auto data = gen_dataset(cfg.spec, s);
      const auto res = run_competitors(data, grid, cfg.estimation, s);
      if (hook) hook(r, data, res);
      for (const auto& [m, why] : res.errors)
        if (!(m == Method::FED_BOOT && cfg.estimation.fed.bootstrap == 0))
          rep.failures.push_back("rep " + std::to_string(r) + " " + to_string(m) + ": " + why);
      for (const auto& [m, curve] : res.curves)
        for (double t : cfg.eval_times)
          for (int a = 0; a < 2; ++a)
            rep.records.push_back({m, t, a, r, res.at(m, t, a), rep.truth[{t, a}]});
      if (res.fed)
        for (double t : cfg.eval_times)
          for (int a = 0; a < 2; ++a) {
            const auto& eta = res.fed->fed.point(t, a).weights.eta;
            auto& acc = rep.mean_weights[{t, a}];
            acc.resize(static_cast<std::size_t>(eta.size()), 0.0);
            for (Eigen::Index k = 0; k < eta.size(); ++k) acc[static_cast<std::size_t>(k)] += eta(k);
            ++weight_count[{t, a}];
          }
      ++rep.reps_completed;
    } catch (const Error& e) {
      ++rep.failed_reps;
      rep.failures.push_back("rep " + std::to_string(r) + ": " + e.what());
    }
  }
  for (auto& [key, acc] : rep.mean_weights)
    for (double& v : acc) v /= static_cast<double>(weight_count[key]);
  rep.summary = summarize(rep.records, cfg.eval_times);
  const std::size_t attempted = rep.reps_completed + rep.failed_reps;
  require(static_cast<double>(rep.failed_reps) <= cfg.max_failure_fraction * static_cast<double>(std::max<std::size_t>(attempted, 1)),
          ErrorKind::NumericalError,
          std::to_string(rep.failed_reps) + " of " + std::to_string(attempted) + " replicates failed");
  return rep;
}

inline void write_replicates_csv(std::ostream& out, const MetricsReport& r) {
  out << "method,t,a,rep,estimate,se,ci_lo,ci_hi,truth\n";
  for (const auto& x : r.records)
    out << to_string(x.method) << ',' << format_double(x.t) << ',' << x.a << ',' << x.rep << ','
        << format_double(x.estimate.theta) << ',' << format_double(x.estimate.se) << ','
        << format_double(x.estimate.ci_lo) << ',' << format_double(x.estimate.ci_hi) << ',' << format_double(x.truth)
        << '\n';
}

inline void write_summary_csv(std::ostream& out, const MetricsReport& r) {
  out << "scenario,n_source,method,t,a,reps,bias,rmse,rrmse,ci_width,cp\n";
  for (const auto& x : r.summary)
    out << to_string(r.scenario) << ',' << r.n_source << ',' << to_string(x.method) << ',' << format_double(x.t) << ','
        << x.a << ',' << x.reps << ',' << format_double(x.bias) << ',' << format_double(x.rmse) << ','
        << format_double(x.rrmse) << ',' << format_double(x.ci_width) << ',' << format_double(x.cp) << '\n';
}

}  // namespace fedsurv
