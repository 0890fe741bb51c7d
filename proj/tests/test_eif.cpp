#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "fedsurv/eif/h_functional.hpp"
#include "fedsurv/eif/influence.hpp"

using namespace fedsurv;
using fedsurv::fixtures::fit_scenario;

namespace {

// H(t) written directly from its definition, one time point at a time.
double h_reference(std::size_t yidx, int delta, const std::vector<double>& s, const std::vector<double>& g,
                   std::size_t t) {
  double v = (delta == 1 && yidx <= t) ? 1.0 / (s[yidx] * g[yidx - 1]) : 0.0;
  for (std::size_t u = 1; u <= std::min(t, yidx); ++u) v -= (1.0 - s[u] / s[u - 1]) / (s[u] * g[u - 1]);
  return v;
}

}  // namespace

TEST(HFunctional, HandValues) {
  const std::vector<double> s{1.0, 0.8, 0.5, 0.4}, g{1.0, 0.9, 0.6, 0.3};
  std::vector<double> out(4);
  h_curve(2, 1, s, g, out);
  EXPECT_DOUBLE_EQ(out[0], 0.0);
  EXPECT_NEAR(out[1], -0.25, 1e-15);
  EXPECT_NEAR(out[2], 1.0 / 0.45 - 0.25 - 0.375 / 0.45, 1e-14);
  EXPECT_NEAR(out[3], out[2], 1e-15);
  h_curve(2, 0, s, g, out);
  EXPECT_NEAR(out[3], -0.25 - 0.375 / 0.45, 1e-14);
}

TEST(HFunctional, MatchesDefinitionOnRandomCurves) {
  std::mt19937_64 eng(3);
  std::uniform_real_distribution<double> u(0.3, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + eng() % 12;
    std::vector<double> s(n, 1.0), g(n, 1.0);
    for (std::size_t i = 1; i < n; ++i) s[i] = s[i - 1] * u(eng), g[i] = g[i - 1] * u(eng);
    const std::size_t yidx = 1 + eng() % (n - 1);
    const int delta = static_cast<int>(eng() % 2);
    std::vector<double> out(n);
    h_curve(yidx, delta, s, g, out);
    for (std::size_t t = 0; t < n; ++t) {
      const double ref = h_reference(yidx, delta, s, g, t);
      EXPECT_NEAR(out[t], ref, 1e-13 * std::max(1.0, std::abs(ref)));
    }
  }
}

TEST(HFunctional, StepCurveInterface) {
  TimeGrid grid({0.0, 1.0, 2.0, 3.0});
  StepCurve s{grid, {1.0, 0.8, 0.5, 0.4}, CurveKind::Survival};
  StepCurve g{grid, {1.0, 0.9, 0.6, 0.3}, CurveKind::Survival};
  StepCurve lam{grid, {0.0, 0.2, 0.575, 0.775}, CurveKind::CumHazard};
  EXPECT_NEAR(h_functional(1.5, 1, s, g, lam, 2.5), 1.0 / 0.45 - 0.25 - 0.375 / 0.45, 1e-14);
  EXPECT_NEAR(h_functional(1.5, 1, s, g, lam, 1.0), -0.25, 1e-15);
  StepCurve g0{grid, {1.0, 0.0, 0.0, 0.0}, CurveKind::Survival};
  EXPECT_THROW(h_functional(2.5, 1, s, g0, lam, 3.0), Error);
}

TEST(HFunctional, MeanZeroUnderAnalyticNuisances) {
  // small-sample version of the martingale check; the acceptance binary runs 1e5 draws
  const SiteKnobs knobs;
  const auto grid = TimeGrid::regular(90, 0.1);
  const std::size_t i30 = grid.index_of(30), i60 = grid.index_of(60), i90 = grid.index_of(90);
  auto eng = make_engine(5, "h_mean_zero", {});
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> s(grid.size()), g(grid.size()), out(grid.size());
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    const auto x = dgp::draw_covariates(eng, knobs);
    const int a = unif(eng) < dgp::propensity(x) ? 1 : 0;
    const double ht = dgp::event_log_hazard(x, a, knobs), hc = dgp::censoring_log_hazard(x, a, knobs);
    const double t = dgp::weibull_time(dgp::uniform_open(eng), ht);
    const double c = std::min(dgp::weibull_time(dgp::uniform_open(eng), hc), dgp::kCensorCap);
    for (std::size_t u = 0; u < grid.size(); ++u) {
      s[u] = dgp::weibull_survival(grid[u], ht);
      g[u] = dgp::censoring_survival(grid[u], hc);
    }
    h_curve(observed_index(grid, std::min(t, c)), t <= c ? 1 : 0, s, g, out);
    const std::size_t idx[3] = {i30, i60, i90};
    for (int j = 0; j < 3; ++j) sum[j] += out[idx[j]], sq[j] += out[idx[j]] * out[idx[j]];
  }
  for (int j = 0; j < 3; ++j) {
    const double m = sum[j] / N, se = std::sqrt((sq[j] / N - m * m) / N);
    EXPECT_LT(std::abs(m), 3.0 * se) << "time index " << j;
  }
}

TEST(Influence, CenteringAndSiteStructure) {
  const auto f = fit_scenario(Scenario::AllShift, 3, 120, 150, 21, TimeGrid::regular(200, 5));
  const auto& table = f.table;
  for (const auto& e : table.estimators())
    for (int a = 0; a < 2; ++a) {
      const auto& s = table.slice(e, a);
      for (std::size_t g = 0; g < s.grid_size; ++g) {
        double total = 0.0, scale = 1.0, raw = 0.0;
        for (std::size_t r = 0; r < s.width(); ++r) {
          total += s.phi_centered(g, r);
          raw += s.phi(g, r);
          scale = std::max(scale, std::abs(s.phi(g, r)));
        }
        EXPECT_LT(std::abs(total / double(table.n())), 1e-14 * scale) << to_string(e) << " g=" << g;
        EXPECT_NEAR(raw / double(table.n()), s.theta[g], 1e-12 * scale);
      }
    }
  // the target-only slice touches only target rows, a site slice only target and site-k rows
  for (std::size_t r = 0; r < table.slice({EstimatorKind::TGT, 0}, 0).width(); ++r)
    EXPECT_EQ(table.slice({EstimatorKind::TGT, 0}, 0).row_site[r], 0);
  for (int s : table.slice({EstimatorKind::SITE, 2}, 1).row_site) EXPECT_TRUE(s == 0 || s == 2);
}

TEST(Influence, AtTimeZeroEverySurvivalIsOne) {
  const auto f = fit_scenario(Scenario::Homogeneous, 2, 80, 80, 4, TimeGrid::regular(100, 10));
  for (const auto& e : f.table.estimators())
    for (int a = 0; a < 2; ++a) {
      EXPECT_NEAR(f.table.theta(e, 0.0, a), 1.0, 1e-12) << to_string(e);
      EXPECT_NEAR(estimator_variance(f.table, e, 0.0, a).se, 0.0, 1e-12);
      EXPECT_FALSE(estimator_variance(f.table, e, 0.0, a).ci_available);
    }
}

TEST(Influence, SiteEstimatorIsAnchorMeanMinusAugmentationMean) {
  const auto f = fit_scenario(Scenario::CovariateShift, 3, 100, 120, 8, TimeGrid::regular(150, 10));
  const auto& tgt = f.table.slice({EstimatorKind::TGT, 0}, 1);
  const auto& site = f.table.slice({EstimatorKind::SITE, 1}, 1);
  const std::size_t g = f.table.grid().index_of(60);
  double anchor = 0.0, aug = 0.0, nk = 0.0;
  for (std::size_t r = 0; r < tgt.width(); ++r) anchor += tgt.anchor[g * tgt.width() + r];
  for (std::size_t r = 0; r < site.width(); ++r)
    if (site.row_site[r] == 1) aug += site.aug[g * site.width() + r], nk += 1.0;
  EXPECT_NEAR(site.theta[g], anchor / double(tgt.width()) - aug / nk, 1e-12);
  EXPECT_NEAR(discrepancy(f.table, 1, 60, 1), site.theta[g] - tgt.theta[g], 1e-15);
}

TEST(Influence, SingleSiteCcodEqualsTarget) {
  const auto f = fit_scenario(Scenario::Homogeneous, 1, 200, 0, 17, TimeGrid::regular(200, 2));
  for (int a = 0; a < 2; ++a)
    for (double t : f.table.grid().points()) {
      const auto tgt = estimator_variance(f.table, {EstimatorKind::TGT, 0}, t, a);
      const auto cc = estimator_variance(f.table, {EstimatorKind::CCOD, 0}, t, a);
      const auto pool = estimator_variance(f.table, {EstimatorKind::POOL, 0}, t, a);
      EXPECT_NEAR(cc.theta, tgt.theta, 1e-12);
      EXPECT_NEAR(cc.se, tgt.se, 1e-12);
      EXPECT_NEAR(pool.theta, tgt.theta, 1e-12);
    }
}

TEST(Influence, VarianceIsMeanSquaredCenteredInfluence) {
  const auto f = fit_scenario(Scenario::Homogeneous, 2, 90, 90, 31, TimeGrid::regular(100, 10));
  const auto& s = f.table.slice({EstimatorKind::TGT, 0}, 0);
  const std::size_t g = f.table.grid().index_of(50);
  // the target estimator is a target-site mean: se^2 = sample variance / n0
  const double n0 = double(s.width());
  double m = 0.0, v = 0.0;
  for (std::size_t r = 0; r < s.width(); ++r) m += s.anchor[g * s.width() + r] - s.aug[g * s.width() + r];
  m /= n0;
  for (std::size_t r = 0; r < s.width(); ++r) {
    const double d = s.anchor[g * s.width() + r] - s.aug[g * s.width() + r] - m;
    v += d * d;
  }
  const auto est = estimator_variance(f.table, {EstimatorKind::TGT, 0}, 50, 0);
  EXPECT_NEAR(est.theta, m, 1e-12);
  EXPECT_NEAR(est.se, std::sqrt(v / n0 / n0), 1e-12);
}

TEST(Influence, WaldIntervalClampsAndDegenerates) {
  auto e = wald_interval(0.99, 0.05, 10);
  EXPECT_DOUBLE_EQ(e.ci_hi, 1.0);
  EXPECT_NEAR(e.ci_lo, 0.99 - 1.959963984540054 * 0.05, 1e-15);
  auto z = wald_interval(0.5, 0.0, 10);
  EXPECT_FALSE(z.ci_available);
  EXPECT_EQ(z.ci_lo, 0.5);
}

TEST(Influence, WrongModeAndMissingSlices) {
  const auto f = fit_scenario(Scenario::Homogeneous, 2, 60, 60, 2, TimeGrid::regular(50, 10), false);
  EXPECT_THROW(eif_ccod(f.data, f.bundle, 0), Error);
  try {
    f.table.slice({EstimatorKind::CCOD, 0}, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyTable);
  }
  InfluenceTable empty;
  EXPECT_THROW(estimator_variance(empty, {EstimatorKind::TGT, 0}, 0.0, 0), Error);
}

TEST(Influence, CsvExportHasOneLinePerActiveRow) {
  const auto f = fit_scenario(Scenario::Homogeneous, 2, 40, 40, 9, TimeGrid::regular(20, 10), false);
  std::ostringstream os;
  write_influence_csv(os, f.table);
  std::size_t expected = 1;
  for (const auto& e : f.table.estimators())
    for (int a = 0; a < 2; ++a) expected += f.table.slice(e, a).width() * f.table.grid().size();
  std::size_t lines = 0;
  for (char c : os.str()) lines += c == '\n';
  EXPECT_EQ(lines, expected);
}
