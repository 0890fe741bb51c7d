#include <fcntl.h>
#include <gtest/gtest.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedsurv/fednet/transport.hpp"

extern char** environ;

namespace {

namespace fs = std::filesystem;

const fs::path kWork = fs::path(FEDSURV_TEST_WORK) / "cli";

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> f;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, sep);) f.push_back(cell);
  if (!s.empty() && s.back() == sep) f.emplace_back();
  return f;
}

/// A child process running the CLI with stderr captured to a file.
class Process {
 public:
  Process(std::vector<std::string> args, const fs::path& log) : log_(log) {
    args.insert(args.begin(), FEDSURV_CLI);
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_addopen(&fa, 2, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    posix_spawn_file_actions_addopen(&fa, 1, "/dev/null", O_WRONLY, 0);
    if (posix_spawn(&pid_, argv[0], &fa, nullptr, argv.data(), environ) != 0)
      throw std::runtime_error("cannot spawn the CLI");
    posix_spawn_file_actions_destroy(&fa);
  }
  Process(const Process&) = delete;
  Process& operator=(const Process&) = delete;
  ~Process() {
    if (pid_ > 0) {
      kill(pid_, SIGKILL);
      wait();
    }
  }

  int wait() {
    int status = 0;
    waitpid(pid_, &status, 0);
    pid_ = -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  }

  std::string log() const { return read_file(log_); }

  /// Port announced by a site process on stderr.
  int listening_port() const {
    const std::regex re("listening on [^:]+:(\\d+)");
    for (int i = 0; i < 300; ++i) {
      std::smatch m;
      const auto text = log();
      if (std::regex_search(text, m, re)) return std::stoi(m[1]);
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    throw std::runtime_error("site never announced a port: " + log());
  }

 private:
  pid_t pid_ = -1;
  fs::path log_;
};

struct RunResult {
  int code;
  std::string err;
};

RunResult run(std::vector<std::string> args, const std::string& tag) {
  const auto log = kWork / (tag + ".stderr");
  Process p(std::move(args), log);
  const int code = p.wait();
  return {code, read_file(log)};
}

const std::vector<std::string> kSmall = {"--tau", "90", "--step", "10", "--folds", "2", "--bootstrap", "4"};

std::vector<std::string> with_small(std::vector<std::string> args) {
  args.insert(args.end(), kSmall.begin(), kSmall.end());
  return args;
}

/// One small simulation with a dumped replicate, shared by the tests below.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    const auto r = run(with_small({"simulate", "--scenario", "covariate_shift", "--sites", "3", "--n0", "80", "--nk",
                                   "100", "--reps", "2", "--n-super", "100000", "--seed", "7", "--dump-rep", "1",
                                   "--out", (kWork / "sim").string()}),
                       "sim");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = lines_of(kWork / "sim" / "rep1_data.csv");
    std::map<std::string, std::ofstream> per_site;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto site = split(rows[i]).back();
      auto& f = per_site[site];
      if (!f.is_open()) {
        f.open(kWork / ("site" + site + ".csv"));
        f << rows[0] << '\n';
      }
      f << rows[i] << '\n';
    }
  }

  static fs::path data() { return kWork / "sim" / "rep1_data.csv"; }
  static fs::path site_csv(int k) { return kWork / ("site" + std::to_string(k) + ".csv"); }
};

void expect_csv_near(const fs::path& a, const fs::path& b, double tol) {
  const auto la = lines_of(a);
  const auto lb = lines_of(b);
  ASSERT_EQ(la.size(), lb.size()) << a << " vs " << b;
  ASSERT_FALSE(la.empty());
  EXPECT_EQ(la[0], lb[0]);
  for (std::size_t i = 1; i < la.size(); ++i) {
    const auto fa = split(la[i]);
    const auto fb = split(lb[i]);
    ASSERT_EQ(fa.size(), fb.size()) << "line " << i;
    for (std::size_t j = 0; j < fa.size(); ++j) {
      char* end_a = nullptr;
      char* end_b = nullptr;
      const double x = std::strtod(fa[j].c_str(), &end_a);
      const double y = std::strtod(fb[j].c_str(), &end_b);
      if (!fa[j].empty() && *end_a == '\0' && !fb[j].empty() && *end_b == '\0')
        EXPECT_NEAR(x, y, tol) << a << " line " << i << " field " << j;
      else
        EXPECT_EQ(fa[j], fb[j]) << a << " line " << i << " field " << j;
    }
  }
}

TEST_F(Cli, SimulateWritesSummaryShapeAndEchoesConfig) {
  const auto rows = lines_of(kWork / "sim" / "summary_covariate_shift.csv");
  ASSERT_EQ(rows.size(), 1u + 6 * 3 * 2);
  std::map<std::string, int> per_method;
  for (std::size_t i = 1; i < rows.size(); ++i) ++per_method[split(rows[i])[2]];
  EXPECT_EQ(per_method.size(), 6u);
  for (const auto& [m, n] : per_method) EXPECT_EQ(n, 6) << m;
  const auto cfg = read_file(kWork / "sim" / "config.json");
  EXPECT_NE(cfg.find("\"seed\": 7"), std::string::npos);
  EXPECT_NE(cfg.find("\"scenario\": \"covariate_shift\""), std::string::npos);
  EXPECT_TRUE(fs::exists(kWork / "sim" / "replicates_covariate_shift.csv"));
  EXPECT_TRUE(fs::exists(kWork / "sim" / "truth_covariate_shift.csv"));
}

TEST_F(Cli, SimulateIsDeterministic) {
  const auto r = run(with_small({"simulate", "--scenario", "covariate_shift", "--sites", "3", "--n0", "80", "--nk", "100",
                                 "--reps", "2", "--n-super", "100000", "--seed", "7", "--dump-rep", "1", "--out",
                                 (kWork / "sim_again").string()}),
                     "sim_again");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& entry : fs::directory_iterator(kWork / "sim")) {
    const auto name = entry.path().filename();
    if (name == "config.json") continue;
    EXPECT_EQ(read_file(entry.path()), read_file(kWork / "sim_again" / name)) << name;
  }
}

TEST_F(Cli, ZeroReplicatesIsAUsageError) {
  const auto r = run({"simulate", "--reps", "0", "--seed", "1", "--out", (kWork / "reps0").string()}, "reps0");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("reps"), std::string::npos) << r.err;
}

TEST_F(Cli, MissingSeedIsAUsageError) {
  const auto r = run({"estimate", "--data", data().string(), "--out", (kWork / "noseed").string()}, "noseed");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("seed"), std::string::npos) << r.err;
}

TEST_F(Cli, EstimateOnDumpReproducesSimulatedCurves) {
  std::string seed = read_file(kWork / "sim" / "rep1_seed.txt");
  seed.erase(seed.find_last_not_of(" \n") + 1);
  const auto out = kWork / "roundtrip";
  const auto r = run(with_small({"estimate", "--data", data().string(), "--seed", seed, "--out", out.string()}), "rt");
  ASSERT_EQ(r.code, 0) << r.err;
  expect_csv_near(out / "curves.csv", kWork / "sim" / "rep1_curves.csv", 1e-12);
  expect_csv_near(out / "weights.csv", kWork / "sim" / "rep1_weights.csv", 1e-12);
}

TEST_F(Cli, SingleSiteGivesTargetOnlyWithNotice) {
  const auto out = kWork / "single";
  const auto r = run(with_small({"estimate", "--data", site_csv(0).string(), "--seed", "3", "--out", out.string()}),
                     "single");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("FED skipped"), std::string::npos) << r.err;
  const auto rows = lines_of(out / "curves.csv");
  ASSERT_GT(rows.size(), 1u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(split(rows[i])[0], "TGT") << rows[i];
  EXPECT_FALSE(fs::exists(out / "fed_curve.csv"));
}

TEST_F(Cli, MalformedDeltaNamesTheRow) {
  auto rows = lines_of(site_csv(0));
  auto fields = split(rows[4]);
  fields[fields.size() - 2] = "2";
  std::string bad;
  for (std::size_t j = 0; j < fields.size(); ++j) bad += (j ? "," : "") + fields[j];
  rows[4] = bad;
  const auto path = kWork / "bad_delta.csv";
  {
    std::ofstream f(path);
    for (const auto& l : rows) f << l << '\n';
  }
  const auto r = run({"estimate", "--data", path.string(), "--seed", "1", "--out", (kWork / "bad").string()}, "bad");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("row 4"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("delta"), std::string::npos) << r.err;
}

TEST_F(Cli, FlagsOverrideConfigFileWhichOverridesDefaults) {
  const auto cfg = kWork / "precedence.json";
  {
    std::ofstream f(cfg);
    f << R"({"tau": 60, "step": 20, "folds": 3, "bootstrap": 0, "seed": 5})";
  }
  const auto out = kWork / "precedence";
  const auto r = run({"estimate", "--config", cfg.string(), "--data", data().string(), "--folds", "2", "--out",
                      out.string()},
                     "precedence");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto echoed = read_file(out / "config.json");
  EXPECT_NE(echoed.find("\"tau\": 60.0"), std::string::npos) << echoed;
  EXPECT_NE(echoed.find("\"folds\": 2"), std::string::npos) << echoed;
  EXPECT_NE(echoed.find("\"seed\": 5"), std::string::npos) << echoed;
  EXPECT_NE(echoed.find("\"eta_cap\": 20.0"), std::string::npos) << echoed;
}

TEST_F(Cli, UnknownConfigFieldIsRejectedByName) {
  const auto cfg = kWork / "unknown.json";
  {
    std::ofstream f(cfg);
    f << R"({"seed": 5, "bootstrapp": 3})";
  }
  const auto r = run({"estimate", "--config", cfg.string(), "--data", data().string(), "--out",
                      (kWork / "unknown").string()},
                     "unknown");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bootstrapp"), std::string::npos) << r.err;
}

TEST_F(Cli, LoopbackCoordinatorEqualsCentralizedEstimate) {
  const auto central = kWork / "central";
  const auto loop = kWork / "loop";
  auto r = run(with_small({"estimate", "--data", data().string(), "--seed", "11", "--out", central.string()}), "central");
  ASSERT_EQ(r.code, 0) << r.err;
  r = run(with_small({"coordinator", "--transport", "loopback", "--data", data().string(), "--seed", "11", "--out",
                      loop.string()}),
          "loop");
  ASSERT_EQ(r.code, 0) << r.err;
  expect_csv_near(loop / "fed_curve.csv", central / "fed_curve.csv", 1e-10);
  expect_csv_near(loop / "weights.csv", central / "weights.csv", 1e-10);
  EXPECT_TRUE(fs::exists(loop / "transcript.jsonl"));
}

TEST_F(Cli, TcpWithTwoSitesEqualsLoopback) {
  const auto loop = kWork / "loop_tcp_ref";
  auto r = run(with_small({"coordinator", "--transport", "loopback", "--data", data().string(), "--seed", "11", "--out",
                           loop.string()}),
               "loop_tcp_ref");
  ASSERT_EQ(r.code, 0) << r.err;

  const auto tcp = kWork / "tcp";
  Process s1({"site", "--data", site_csv(1).string(), "--listen", "127.0.0.1:0", "--timeout-ms", "30000", "--out",
              tcp.string()},
             kWork / "tcp_site1.stderr");
  Process s2({"site", "--data", site_csv(2).string(), "--listen", "127.0.0.1:0", "--timeout-ms", "30000", "--out",
              tcp.string()},
             kWork / "tcp_site2.stderr");
  const auto ep1 = "127.0.0.1:" + std::to_string(s1.listening_port());
  const auto ep2 = "127.0.0.1:" + std::to_string(s2.listening_port());
  r = run(with_small({"coordinator", "--data", site_csv(0).string(), "--connect", ep1 + "," + ep2, "--seed", "11",
                      "--out", tcp.string()}),
          "tcp_coord");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(s1.wait(), 0) << s1.log();
  EXPECT_EQ(s2.wait(), 0) << s2.log();
  EXPECT_EQ(read_file(tcp / "fed_curve.csv"), read_file(loop / "fed_curve.csv"));
  EXPECT_EQ(read_file(tcp / "weights.csv"), read_file(loop / "weights.csv"));
  EXPECT_EQ(read_file(tcp / "fed_boot_curve.csv"), read_file(loop / "fed_boot_curve.csv"));
  EXPECT_TRUE(fs::exists(tcp / "site1_transcript.jsonl"));
  EXPECT_TRUE(fs::exists(tcp / "site2_transcript.jsonl"));
}

TEST_F(Cli, SiteDyingMidRunIsDroppedWithExitTwo) {
  // Site 2 announces itself and then disappears before sending any summaries.
  fedsurv::TcpListener dying("127.0.0.1", 0);
  std::thread fake([&] {
    auto ch = dying.accept(std::chrono::milliseconds(30000));
    if (!ch) return;
    ch->send_line(R"({"v":1,"kind":"Hello","site":2,"payload":{}})");
    ch->receive_line(std::chrono::milliseconds(30000));
    ch->close();
  });

  const auto out = kWork / "dying";
  Process s1({"site", "--data", site_csv(1).string(), "--listen", "127.0.0.1:0", "--timeout-ms", "30000", "--out",
              out.string()},
             kWork / "dying_site1.stderr");
  const auto ep1 = "127.0.0.1:" + std::to_string(s1.listening_port());
  const auto ep2 = "127.0.0.1:" + std::to_string(dying.port());
  const auto r = run(with_small({"coordinator", "--data", site_csv(0).string(), "--connect", ep1 + "," + ep2, "--seed",
                                 "11", "--timeout-ms", "30000", "--out", out.string()}),
                     "dying_coord");
  fake.join();
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_EQ(s1.wait(), 0) << s1.log();
  const auto events = read_file(out / "events.txt");
  EXPECT_NE(events.find("site 2 dropped"), std::string::npos) << events;
  const auto weights = lines_of(out / "weights.csv");
  ASSERT_GT(weights.size(), 1u);
  std::set<std::string> sites;
  const auto header = split(weights[0]);
  const auto col = std::find(header.begin(), header.end(), "site") - header.begin();
  ASSERT_LT(static_cast<std::size_t>(col), header.size()) << weights[0];
  for (std::size_t i = 1; i < weights.size(); ++i) sites.insert(split(weights[i])[col]);
  EXPECT_EQ(sites, (std::set<std::string>{"0", "1"}));
}

TEST_F(Cli, UnreachableEndpointIsDroppedWithExitTwo) {
  int port = 0;
  {
    fedsurv::TcpListener closed("127.0.0.1", 0);
    port = closed.port();
  }
  const auto out = kWork / "unreachable";
  Process s1({"site", "--data", site_csv(1).string(), "--listen", "127.0.0.1:0", "--timeout-ms", "30000", "--out",
              out.string()},
             kWork / "unreachable_site1.stderr");
  const auto ep1 = "127.0.0.1:" + std::to_string(s1.listening_port());
  const auto r = run(with_small({"coordinator", "--data", site_csv(0).string(), "--connect",
                                 ep1 + ",127.0.0.1:" + std::to_string(port), "--seed", "11", "--timeout-ms", "1000",
                                 "--out", out.string()}),
                     "unreachable_coord");
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_EQ(s1.wait(), 0) << s1.log();
  EXPECT_NE(read_file(out / "events.txt").find("dropped"), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "fed_curve.csv"));
}

TEST_F(Cli, ReportRecomputesSummaryFromReplicates) {
  const auto out = kWork / "report";
  const auto r = run({"report", "--input", (kWork / "sim" / "replicates_covariate_shift.csv").string(), "--out",
                      out.string()},
                     "report");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = lines_of(out / "report.csv");
  const auto sum = lines_of(kWork / "sim" / "summary_covariate_shift.csv");
  ASSERT_EQ(rep.size(), sum.size());
  // summary rows carry two leading columns (scenario, n_source) that report omits
  for (std::size_t i = 1; i < rep.size(); ++i) {
    const auto s = split(sum[i]);
    std::string tail;
    for (std::size_t j = 2; j < s.size(); ++j) tail += (j > 2 ? "," : "") + s[j];
    EXPECT_EQ(rep[i], tail);
  }
}

}  // namespace
