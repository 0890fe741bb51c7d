#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <thread>

#include "fedsurv/fednet/roles.hpp"
#include "fedsurv/simbench/dgp.hpp"

using namespace fedsurv;

namespace {

FederationSettings small_settings(std::uint64_t seed, std::size_t bootstrap = 8) {
  FederationSettings s;
  s.grid = TimeGrid::regular(90.0, 10.0);
  s.folds = 2;
  s.fed.seed = seed;
  s.fed.cv_folds = 3;
  s.fed.bootstrap = bootstrap;
  return s;
}

Dataset scenario_data(Scenario sc, int K, std::size_t n0, std::size_t nk, std::uint64_t seed) {
  ScenarioSpec spec;
  spec.scenario = sc;
  spec.K = K;
  spec.n0 = n0;
  spec.n_source = nk;
  return gen_dataset(spec, seed);
}

struct Centralized {
  FedInputs inputs;
  FedResult result;
};

Centralized centralized(const Dataset& data, const FederationSettings& s) {
  const auto folds = make_folds(data, s.folds, s.fed.seed);
  const auto b = build_nuisance_bundle(data, folds, s.grid, true, false, federation_bundle_options(s), s.fed.seed);
  const auto table = build_influence_table(data, b, false);
  Centralized c;
  c.inputs = fed_inputs(table, num_sites(data), s.fed);
  c.result = fed_curves(c.inputs, s.fed);
  return c;
}

void expect_moments_equal(const Moments& x, const Moments& y) {
  EXPECT_EQ(x.w, y.w);
  EXPECT_EQ(x.m1, y.m1);
  EXPECT_EQ(x.m2, y.m2);
  EXPECT_EQ(x.c11, y.c11);
  EXPECT_EQ(x.c22, y.c22);
  EXPECT_EQ(x.c12, y.c12);
}

double max_curve_diff(const FedCurveEstimate& x, const FedCurveEstimate& y) {
  double d = 0.0;
  for (int a = 0; a < 2; ++a)
    for (std::size_t g = 0; g < x.grid.size(); ++g) {
      const auto& p = x.points[a][g];
      const auto& q = y.points[a][g];
      d = std::max(d, (p.weights.eta - q.weights.eta).cwiseAbs().maxCoeff());
      d = std::max(d, std::abs(p.estimate.theta - q.estimate.theta));
      d = std::max(d, std::abs(p.variance - q.variance));
      d = std::max(d, std::abs(x.corrected[a][g].theta - y.corrected[a][g].theta));
      d = std::max(d, std::abs(x.corrected[a][g].ci_lo - y.corrected[a][g].ci_lo));
      d = std::max(d, std::abs(x.corrected[a][g].ci_hi - y.corrected[a][g].ci_hi));
    }
  return d;
}

}  // namespace

TEST(Protocol, EnvelopeRoundTrip) {
  Message m{kProtocolVersion, MessageKind::AugmentationMoments, 3, {{"rows", 7}}};
  const auto line = encode(m);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  const auto back = decode(line);
  EXPECT_EQ(back.v, kProtocolVersion);
  EXPECT_EQ(back.kind, MessageKind::AugmentationMoments);
  EXPECT_EQ(back.site, 3);
  EXPECT_EQ(back.payload["rows"], 7);
}

TEST(Protocol, MalformedEnvelopesAreRejected) {
  for (const std::string bad : {"not json", "[1,2]", R"({"v":1,"kind":"Hello","site":1})",
                                R"({"v":1,"kind":"Bogus","site":1,"payload":{}})",
                                R"({"v":"1","kind":"Hello","site":1,"payload":{}})",
                                R"({"v":1,"kind":"Hello","site":1,"payload":[]})"}) {
    try {
      decode(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::ProtocolError) << bad;
    }
  }
}

TEST(Protocol, DoublesSurviveTheWireBitExactly) {
  std::mt19937_64 eng(11);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int i = 0; i < 2000; ++i) {
    Moments m{std::floor(u(eng) + 1e3), u(eng), u(eng) * 1e-9, std::abs(u(eng)), std::abs(u(eng)) * 1e7, u(eng) / 3};
    const auto back = moments_from_json(nlohmann::json::parse(moments_json(m).dump()));
    expect_moments_equal(m, back);
  }
}

TEST(Protocol, SurvivalModelRoundTripPredictsIdentically) {
  const auto data = scenario_data(Scenario::Homogeneous, 1, 200, 0, 4);
  const auto grid = TimeGrid::regular(90.0, 5.0);
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  EnsembleOptions opt;
  for (auto learner : {SurvivalLearner::MarginalKM, SurvivalLearner::StratifiedKM, SurvivalLearner::Cox}) {
    opt.candidates = {learner};
    const auto m = fit_survival_ensemble(RowView(data, all), Outcome::Event, grid, opt, 1);
    const auto back = survival_model_from_json(nlohmann::json::parse(survival_model_json(m).dump()), grid);
    std::vector<double> p(grid.size()), q(grid.size());
    for (std::size_t i = 0; i < 20; ++i)
      for (int a = 0; a < 2; ++a) {
        m.predict(data[i].x, a, p);
        back.predict(data[i].x, a, q);
        EXPECT_EQ(p, q);
      }
  }
}

TEST(Protocol, SettingsRoundTrip) {
  auto s = small_settings(99, 3);
  s.ensemble.candidates = {SurvivalLearner::Cox};
  const auto back = settings_from_json(nlohmann::json::parse(settings_json(s).dump()));
  EXPECT_EQ(back.grid.size(), s.grid.size());
  EXPECT_EQ(back.folds, s.folds);
  EXPECT_EQ(back.fed.seed, s.fed.seed);
  EXPECT_EQ(back.fed.bootstrap, s.fed.bootstrap);
  EXPECT_EQ(back.fed.cv_folds, s.fed.cv_folds);
  ASSERT_EQ(back.ensemble.candidates.size(), 1u);
  EXPECT_EQ(back.ensemble.candidates[0], SurvivalLearner::Cox);
}

TEST(Transport, LoopbackOrderTimeoutAndClose) {
  auto [a, b] = loopback_pair();
  a->send_line("one");
  a->send_line("two");
  EXPECT_EQ(*b->receive_line(Millis(100)), "one");
  EXPECT_EQ(*b->receive_line(Millis(100)), "two");
  EXPECT_FALSE(b->receive_line(Millis(20)).has_value());
  a->close();
  EXPECT_THROW(b->receive_line(Millis(100)), Error);
  EXPECT_THROW(b->send_line("x"), Error);
}

TEST(Transport, TcpExchangesLargeLines) {
  TcpListener listener("127.0.0.1", 0);
  const std::string big(1 << 20, 'z');
  std::thread client([&] {
    auto c = tcp_connect("127.0.0.1", listener.port());
    c->send_line("hello");
    c->send_line(big);
    EXPECT_EQ(*c->receive_line(Millis(5000)), "bye");
  });
  auto server = listener.accept(Millis(5000));
  ASSERT_TRUE(server);
  EXPECT_EQ(*server->receive_line(Millis(5000)), "hello");
  EXPECT_EQ(*server->receive_line(Millis(5000)), big);
  server->send_line("bye");
  client.join();
  server->close();
}

TEST(Transport, TcpPeerCloseIsReported) {
  TcpListener listener("127.0.0.1", 0);
  std::thread client([&] { tcp_connect("127.0.0.1", listener.port())->close(); });
  auto server = listener.accept(Millis(5000));
  client.join();
  ASSERT_TRUE(server);
  try {
    server->receive_line(Millis(5000));
    ADD_FAILURE() << "expected SiteUnavailable";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SiteUnavailable);
  }
}

class Federation : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new Dataset(scenario_data(Scenario::AllShift, 5, 150, 200, 21));
    settings_ = new FederationSettings(small_settings(21));
    central_ = new Centralized(centralized(*data_, *settings_));
    auto [target, sources] = split_by_site(*data_);
    dist_ = new CoordinatorResult(run_loopback_federation(target, sources, *settings_));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete settings_;
    delete central_;
    delete dist_;
  }
  static Dataset* data_;
  static FederationSettings* settings_;
  static Centralized* central_;
  static CoordinatorResult* dist_;
};

Dataset* Federation::data_ = nullptr;
FederationSettings* Federation::settings_ = nullptr;
Centralized* Federation::central_ = nullptr;
CoordinatorResult* Federation::dist_ = nullptr;

TEST_F(Federation, MomentsMatchTheCentralizedComputation) {
  EXPECT_TRUE(dist_->events.empty());
  ASSERT_EQ(dist_->sites, (std::vector<int>{1, 2, 3, 4}));
  const auto& c = central_->inputs;
  const auto& d = dist_->inputs;
  ASSERT_EQ(d.sources.size(), c.sources.size());
  EXPECT_EQ(d.n(), c.n());
  auto same = [&](const SiteMoments& x, const SiteMoments& y) {
    EXPECT_EQ(x.site, y.site);
    EXPECT_EQ(x.rows, y.rows);
    ASSERT_EQ(x.full.size(), y.full.size());
    for (std::size_t i = 0; i < x.full.size(); ++i) expect_moments_equal(x.full[i], y.full[i]);
    ASSERT_EQ(x.cv.size(), y.cv.size());
    for (std::size_t f = 0; f < x.cv.size(); ++f)
      for (std::size_t i = 0; i < x.cv[f].size(); ++i) expect_moments_equal(x.cv[f][i], y.cv[f][i]);
    ASSERT_EQ(x.boot.size(), y.boot.size());
    for (std::size_t b = 0; b < x.boot.size(); ++b)
      for (std::size_t i = 0; i < x.boot[b].size(); ++i) expect_moments_equal(x.boot[b][i], y.boot[b][i]);
  };
  same(d.target, c.target);
  for (std::size_t k = 0; k < c.sources.size(); ++k) same(d.sources[k], c.sources[k]);
}

TEST_F(Federation, CurvesWeightsAndVarianceMatchTheCentralizedComputation) {
  EXPECT_LE(max_curve_diff(dist_->result.fed, central_->result.fed), 1e-10);
  ASSERT_TRUE(dist_->result.boot && central_->result.boot);
  EXPECT_LE(max_curve_diff(*dist_->result.boot, *central_->result.boot), 1e-10);
}

TEST_F(Federation, TranscriptPassesThePrivacyAudit) {
  std::map<int, std::size_t> rows;
  for (const auto& o : *data_) ++rows[o.r];
  EXPECT_TRUE(audit_transcript(dist_->transcript, rows).empty());
  std::size_t from_sites = 0;
  for (const auto& e : dist_->transcript) from_sites += e.direction == "recv";
  EXPECT_EQ(from_sites, 4u * 3u);
  for (const auto& e : dist_->transcript) {
    if (e.direction != "recv") continue;
    const auto m = decode(e.line);
    EXPECT_NE(m.kind, MessageKind::ModelBroadcast);
  }
}

TEST(PrivacyAudit, FlagsPerObservationFields) {
  Message leak{kProtocolVersion, MessageKind::AugmentationMoments, 2, {{"moments", {{"y", {1.0, 2.0, 3.0}}}}}};
  EXPECT_FALSE(audit_message(leak).empty());
  Message sized{kProtocolVersion, MessageKind::CovariateSummary, 2, {{"mean", std::vector<double>(50, 1.0)}}};
  EXPECT_TRUE(audit_message(sized).empty());
  EXPECT_FALSE(audit_message(sized, 50).empty());
  for (const auto& key : allowed_payload_keys())
    for (const std::string forbidden : {"x", "x1", "y", "delta", "a", "r", "aug", "values", "rows_data"})
      EXPECT_NE(key, forbidden);
}

TEST(FederationRoles, ZeroRespondingSitesGiveTheTargetEstimator) {
  const auto data = scenario_data(Scenario::Homogeneous, 1, 150, 0, 8);
  const auto s = small_settings(8, 0);
  std::vector<std::unique_ptr<Channel>> none;
  const auto res = coordinator_run(data, none, s);
  EXPECT_TRUE(res.sites.empty());

  const auto folds = make_folds(data, s.folds, s.fed.seed);
  const auto b = build_nuisance_bundle(data, folds, s.grid, true, false, federation_bundle_options(s), s.fed.seed);
  const auto table = build_influence_table(data, b, false);
  for (int a = 0; a < 2; ++a)
    for (std::size_t g = 0; g < s.grid.size(); ++g) {
      const auto tgt = estimator_variance(table, {EstimatorKind::TGT, 0}, s.grid[g], a);
      const auto& p = res.result.fed.points[a][g];
      EXPECT_EQ(p.weights.eta(0), 1.0);
      EXPECT_NEAR(p.estimate.theta, tgt.theta, 1e-12);
      EXPECT_NEAR(p.estimate.se, tgt.se, 1e-12);
    }
}

TEST(FederationRoles, DroppedSiteIsLoggedAndWeightsAreResolved) {
  const auto data = scenario_data(Scenario::Homogeneous, 4, 120, 150, 5);
  const auto s = small_settings(5, 0);
  auto [target, sources] = split_by_site(data);
  const auto central = centralized(data, s);

  std::vector<std::unique_ptr<Channel>> coord;
  std::vector<std::unique_ptr<Channel>> ends;
  for (int i = 0; i < 3; ++i) {
    auto [c, e] = loopback_pair();
    coord.push_back(std::move(c));
    ends.push_back(std::move(e));
  }
  std::vector<std::thread> threads;
  for (int i = 0; i < 3; ++i)
    threads.emplace_back([&, i] {
      if (i == 1) {
        // site 2 says hello, then disappears before sending its moments
        ends[i]->send_line(encode({kProtocolVersion, MessageKind::Hello, 2, nlohmann::json::object()}));
        ends[i]->receive_line(Millis(60000));
        ends[i]->close();
        return;
      }
      try {
        site_run(sources[static_cast<std::size_t>(i)], *ends[i]);
      } catch (const Error&) {
      }
    });
  const auto res = coordinator_run(target, coord, s);
  for (auto& t : threads) t.join();
  EXPECT_EQ(res.sites, (std::vector<int>{1, 3}));
  ASSERT_EQ(res.events.size(), 1u);
  EXPECT_NE(res.events[0].find("site 2 dropped: SiteUnavailable"), std::string::npos);

  FedInputs expected = central.inputs;
  expected.sources.erase(expected.sources.begin() + 1);
  const auto solved = fed_curves(expected, s.fed);
  EXPECT_LE(max_curve_diff(res.result.fed, solved.fed), 1e-10);
  EXPECT_TRUE(res.result.fed.errors().empty());
}

TEST(FederationRoles, SiteTimeoutDropsTheSite) {
  const auto data = scenario_data(Scenario::Homogeneous, 2, 120, 150, 6);
  auto [target, sources] = split_by_site(data);
  std::vector<std::unique_ptr<Channel>> coord;
  auto [c, silent] = loopback_pair();
  coord.push_back(std::move(c));
  const auto res = coordinator_run(target, coord, small_settings(6, 0), Millis(50));
  EXPECT_TRUE(res.sites.empty());
  ASSERT_EQ(res.events.size(), 1u);
  EXPECT_NE(res.events[0].find("SiteUnavailable"), std::string::npos);
}

TEST(FederationRoles, VersionMismatchIsAProtocolError) {
  const auto data = scenario_data(Scenario::Homogeneous, 2, 120, 150, 6);
  auto [target, sources] = split_by_site(data);
  std::vector<std::unique_ptr<Channel>> coord;
  auto [c, site] = loopback_pair();
  coord.push_back(std::move(c));
  site->send_line(encode({kProtocolVersion + 1, MessageKind::Hello, 1, nlohmann::json::object()}));
  const auto res = coordinator_run(target, coord, small_settings(6, 0), Millis(2000));
  EXPECT_TRUE(res.sites.empty());
  ASSERT_EQ(res.events.size(), 1u);
  EXPECT_NE(res.events[0].find("ProtocolError"), std::string::npos);
}

TEST(FederationRoles, SiteFailureIsReportedAsErrorMessage) {
  const auto data = scenario_data(Scenario::Homogeneous, 3, 120, 150, 7);
  auto [target, sources] = split_by_site(data);
  sources[1].resize(3);  // fewer rows than two per fold
  const auto res = run_loopback_federation(target, sources, small_settings(7, 0));
  EXPECT_EQ(res.sites, (std::vector<int>{1}));
  ASSERT_EQ(res.events.size(), 1u);
  EXPECT_NE(res.events[0].find("site 2 dropped"), std::string::npos);
  EXPECT_NE(res.events[0].find("InvalidFoldCount"), std::string::npos);
  bool saw_error = false;
  for (const auto& e : res.transcript)
    if (e.direction == "recv" && decode(e.line).kind == MessageKind::Error) saw_error = true;
  EXPECT_TRUE(saw_error);
}

TEST(FederationRoles, SiteRunIsDeterministic) {
  const auto data = scenario_data(Scenario::CovariateShift, 3, 120, 150, 9);
  const auto s = small_settings(9, 4);
  auto [target, sources] = split_by_site(data);
  const auto prep = prepare_target(target, s);
  const auto x = compute_site(sources[1], prep.s0_full, prep.summary, s);
  const auto y = compute_site(sources[1], prep.s0_full, prep.summary, s);
  EXPECT_EQ(site_moments_json(x.moments).dump(), site_moments_json(y.moments).dump());
}

TEST(FederationRoles, MomentsMatchABruteForcePass) {
  const auto data = scenario_data(Scenario::CovariateShift, 3, 120, 150, 10);
  const auto s = small_settings(10, 0);
  auto [target, sources] = split_by_site(data);
  const auto prep = prepare_target(target, s);
  const auto v = source_site_values(sources[0], 1, prep.s0_full, prep.summary, s);
  const auto m = site_moments(v, s.fed.moment_plan());
  for (std::size_t c = 0; c < v.cells; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < v.rows; ++i) {
      sum += v.x1[c * v.rows + i];
      sq += v.x1[c * v.rows + i] * v.x1[c * v.rows + i];
    }
    const double n = static_cast<double>(v.rows);
    const double mean = sum / n;
    EXPECT_EQ(m.full[c].w, n);
    EXPECT_NEAR(m.full[c].m1, mean, 1e-13 * (1 + std::abs(mean)));
    EXPECT_NEAR(m.full[c].var1(), sq / n - mean * mean, 1e-10 * (1 + sq / n));
  }
}

TEST(FederationRoles, EmptyArmGivesZeroMomentsAndDegenerateFlag) {
  const auto data = scenario_data(Scenario::Homogeneous, 2, 150, 150, 12);
  const auto s = small_settings(12, 0);
  auto [target, sources] = split_by_site(data);
  for (auto& o : sources[0]) o.a = 0;
  const auto prep = prepare_target(target, s);
  const auto comp = compute_site(sources[0], prep.s0_full, prep.summary, s);
  EXPECT_FALSE(comp.degenerate[0]);
  EXPECT_TRUE(comp.degenerate[1]);
  for (std::size_t g = 0; g < s.grid.size(); ++g) {
    const auto& m = comp.moments.full[s.grid.size() + g];
    EXPECT_EQ(m.m1, 0.0);
    EXPECT_EQ(m.c11, 0.0);
  }
}
