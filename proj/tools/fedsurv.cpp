// fedsurv command-line tool: simulate, estimate, coordinator, site, report.
//
// Exit codes: 0 clean, 2 degraded but valid (failed replicates, failed methods,
// dropped sites, interrupted run), 1 fatal or usage error.

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedsurv/fedsurv.hpp"

namespace fs = std::filesystem;
using namespace fedsurv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFatal = 1;
constexpr int kExitDegraded = 2;

std::atomic<bool> g_stop{false};

extern "C" void on_interrupt(int) { g_stop.store(true); }

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string command;
  std::string data;
  std::string input;
  std::string out = "out";
  std::string scenario = "homogeneous";
  int sites = 5;
  std::size_t n0 = 300;
  std::size_t nk = 600;
  std::size_t reps = 200;
  std::size_t n_super = 1000000;
  double tau = 200.0;
  double step = 1.0;
  std::size_t folds = 5;
  double eta_cap = 20.0;
  std::vector<double> lambda_grid = default_lambda_grid();
  std::size_t lambda_cv_folds = 5;
  std::size_t bootstrap = 200;
  std::string sharing = "coarse";
  std::string transport = "tcp";
  std::optional<std::uint64_t> seed;
  long timeout_ms = 60000;
  std::string listen = "127.0.0.1:7700";
  std::vector<std::string> connect;
  std::vector<double> eval_times{30.0, 60.0, 90.0};
  std::optional<std::size_t> dump_rep;
  std::vector<std::string> learners{"km", "stratified_km", "cox"};
};

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j{{"command", c.command},
                   {"data", c.data},
                   {"input", c.input},
                   {"out", c.out},
                   {"scenario", c.scenario},
                   {"sites", c.sites},
                   {"n0", c.n0},
                   {"nk", c.nk},
                   {"reps", c.reps},
                   {"n_super", c.n_super},
                   {"tau", c.tau},
                   {"step", c.step},
                   {"folds", c.folds},
                   {"eta_cap", c.eta_cap},
                   {"lambda_grid", c.lambda_grid},
                   {"lambda_cv_folds", c.lambda_cv_folds},
                   {"bootstrap", c.bootstrap},
                   {"sharing", c.sharing},
                   {"transport", c.transport},
                   {"timeout_ms", c.timeout_ms},
                   {"listen", c.listen},
                   {"connect", c.connect},
                   {"eval_times", c.eval_times},
                   {"learners", c.learners}};
  j["seed"] = c.seed ? nlohmann::json(*c.seed) : nlohmann::json(nullptr);
  j["dump_rep"] = c.dump_rep ? nlohmann::json(*c.dump_rep) : nlohmann::json(nullptr);
  return j;
}

template <class T>
void read_field(const nlohmann::json& j, const std::string& key, T& dst) {
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError("config field '" + key + "' has the wrong type");
  }
}

/// Config-file values; only keys present in the file are applied.
void apply_config_file(const std::string& path, RunConfig& c) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "command") continue;
    if (key == "data") read_field(j, key, c.data);
    else if (key == "input") read_field(j, key, c.input);
    else if (key == "out") read_field(j, key, c.out);
    else if (key == "scenario") read_field(j, key, c.scenario);
    else if (key == "sites") read_field(j, key, c.sites);
    else if (key == "n0") read_field(j, key, c.n0);
    else if (key == "nk") read_field(j, key, c.nk);
    else if (key == "reps") read_field(j, key, c.reps);
    else if (key == "n_super") read_field(j, key, c.n_super);
    else if (key == "tau") read_field(j, key, c.tau);
    else if (key == "step") read_field(j, key, c.step);
    else if (key == "folds") read_field(j, key, c.folds);
    else if (key == "eta_cap") read_field(j, key, c.eta_cap);
    else if (key == "lambda_grid") read_field(j, key, c.lambda_grid);
    else if (key == "lambda_cv_folds") read_field(j, key, c.lambda_cv_folds);
    else if (key == "bootstrap") read_field(j, key, c.bootstrap);
    else if (key == "sharing") read_field(j, key, c.sharing);
    else if (key == "transport") read_field(j, key, c.transport);
    else if (key == "timeout_ms") read_field(j, key, c.timeout_ms);
    else if (key == "listen") read_field(j, key, c.listen);
    else if (key == "connect") read_field(j, key, c.connect);
    else if (key == "eval_times") read_field(j, key, c.eval_times);
    else if (key == "learners") read_field(j, key, c.learners);
    else if (key == "seed") {
      if (!value.is_null()) {
        std::uint64_t s;
        read_field(j, key, s);
        c.seed = s;
      }
    } else if (key == "dump_rep") {
      if (!value.is_null()) {
        std::size_t r;
        read_field(j, key, r);
        c.dump_rep = r;
      }
    } else {
      throw UsageError("unknown config field '" + key + "'");
    }
  }
}

void validate(const RunConfig& c) {
  auto check = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw UsageError("invalid " + field + ": " + what);
  };
  const bool needs_seed = c.command == "simulate" || c.command == "estimate" || c.command == "coordinator";
  check(!needs_seed || c.seed.has_value(), "seed", "a seed is required (there is no clock-based default)");
  check(c.reps >= 1, "reps", "must be at least 1");
  check(c.sites >= 1, "sites", "must be at least 1");
  check(c.n0 >= 1, "n0", "must be at least 1");
  check(c.nk >= 1 || c.sites == 1, "nk", "must be at least 1");
  check(c.n_super >= 100000, "n_super", "must be at least 100000");
  check(c.tau > 0.0, "tau", "must be positive");
  check(c.step > 0.0 && c.step <= c.tau, "step", "must be in (0, tau]");
  check(c.folds >= 2, "folds", "must be at least 2");
  check(c.eta_cap > 1.0, "eta_cap", "must exceed 1");
  check(!c.lambda_grid.empty(), "lambda_grid", "must not be empty");
  for (double l : c.lambda_grid) check(l >= 0.0 && std::isfinite(l), "lambda_grid", "values must be finite and >= 0");
  check(c.lambda_cv_folds >= 2, "lambda_cv_folds", "must be at least 2");
  check(c.sharing == "coarse" || c.sharing == "pooled", "sharing", "must be coarse or pooled");
  check(c.transport == "tcp" || c.transport == "loopback", "transport", "must be tcp or loopback");
  check(c.timeout_ms > 0, "timeout_ms", "must be positive");
  check(!c.eval_times.empty(), "eval_times", "must not be empty");
  if (c.command == "simulate")
    for (double t : c.eval_times) check(t >= 0.0 && t <= c.tau, "eval_times", "must lie in [0, tau]");
  check(!c.learners.empty(), "learners", "must not be empty");
  for (const auto& l : c.learners) {
    try {
      learner_from_string(l);
    } catch (const Error&) {
      check(false, "learners", "unknown learner '" + l + "'");
    }
  }
  try {
    scenario_from_string(c.scenario);
  } catch (const Error&) {
    check(false, "scenario", "unknown scenario '" + c.scenario + "'");
  }
  if (c.dump_rep) check(*c.dump_rep < c.reps, "dump_rep", "must be below reps");
}

std::pair<std::string, int> host_port(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw UsageError("endpoint '" + s + "' must be host:port");
  try {
    const int port = std::stoi(s.substr(colon + 1));
    if (port < 0 || port > 65535) throw UsageError("port out of range in '" + s + "'");
    return {s.substr(0, colon), port};
  } catch (const std::logic_error&) {
    throw UsageError("bad port in endpoint '" + s + "'");
  }
}

EnsembleOptions ensemble_options(const RunConfig& c) {
  EnsembleOptions e;
  e.candidates.clear();
  for (const auto& l : c.learners) e.candidates.push_back(learner_from_string(l));
  return e;
}

EstimationConfig estimation_config(const RunConfig& c) {
  EstimationConfig e;
  e.folds = c.folds;
  e.eta_cap = c.eta_cap;
  e.sharing = sharing_from_string(c.sharing);
  e.ensemble = ensemble_options(c);
  e.fed.lambda_grid = c.lambda_grid;
  e.fed.cv_folds = c.lambda_cv_folds;
  e.fed.bootstrap = c.bootstrap;
  e.fed.seed = *c.seed;
  return e;
}

FederationSettings federation_settings(const RunConfig& c) {
  FederationSettings s;
  s.grid = TimeGrid::regular(c.tau, c.step);
  s.folds = c.folds;
  s.eta_cap = c.eta_cap;
  s.ensemble = ensemble_options(c);
  s.fed.lambda_grid = c.lambda_grid;
  s.fed.cv_folds = c.lambda_cv_folds;
  s.fed.bootstrap = c.bootstrap;
  s.fed.seed = c.seed.value_or(0);
  return s;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) fail(ErrorKind::InvalidInput, "cannot write '" + p.string() + "'");
  return out;
}

void echo_config(const RunConfig& c) {
  fs::create_directories(c.out);
  open_out(fs::path(c.out) / "config.json") << to_json(c).dump(2) << '\n';
}

Dataset load_csv(const std::string& path) {
  if (path.empty()) throw UsageError("--data is required");
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IngestionError, "cannot open '" + path + "'");
  try {
    return read_observations(in);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.message());
  }
}

void write_curve_rows(std::ostream& out, const std::string& method, const TimeGrid& grid,
                      const std::array<std::vector<EstimateWithCI>, 2>& curve) {
  for (int a = 0; a < 2; ++a)
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const auto& e = curve[static_cast<std::size_t>(a)][g];
      out << method << ',' << format_double(grid[g]) << ',' << a << ',' << format_double(e.theta) << ','
          << format_double(e.se) << ',' << format_double(e.ci_lo) << ',' << format_double(e.ci_hi) << '\n';
    }
}

void write_curves(std::ostream& out, const CompetitorResult& res, bool target_only) {
  out << "method,t,a,estimate,se,ci_lo,ci_hi\n";
  for (Method m : kAllMethods) {
    if (target_only && m != Method::TGT) continue;
    auto it = res.curves.find(m);
    if (it != res.curves.end()) write_curve_rows(out, to_string(m), res.grid, it->second);
  }
}

void write_fed_curve(std::ostream& out, const FedCurveEstimate& c) {
  out << "t,a,estimate,se,ci_lo,ci_hi,raw_estimate,variance,error\n";
  for (int a = 0; a < 2; ++a)
    for (std::size_t g = 0; g < c.grid.size(); ++g) {
      const auto& e = c.corrected[static_cast<std::size_t>(a)][g];
      const auto& p = c.points[static_cast<std::size_t>(a)][g];
      std::string err = p.error;
      std::replace(err.begin(), err.end(), ',', ';');
      out << format_double(c.grid[g]) << ',' << a << ',' << format_double(e.theta) << ',' << format_double(e.se) << ','
          << format_double(e.ci_lo) << ',' << format_double(e.ci_hi) << ',' << format_double(p.estimate.theta) << ','
          << format_double(p.variance) << ',' << err << '\n';
    }
}

// ---- commands ---------------------------------------------------------------

int cmd_simulate(const RunConfig& c) {
  MonteCarloConfig mc;
  mc.spec.scenario = scenario_from_string(c.scenario);
  mc.spec.K = c.sites;
  mc.spec.n0 = c.n0;
  mc.spec.n_source = c.nk;
  mc.reps = c.reps;
  mc.eval_times = c.eval_times;
  mc.n_super = c.n_super;
  mc.tau = c.tau;
  mc.step = c.step;
  mc.seed = *c.seed;
  mc.estimation = estimation_config(c);
  echo_config(c);
  const fs::path out(c.out);

  ReplicateHook hook;
  if (c.dump_rep) {
    hook = [&](std::size_t r, const Dataset& data, const CompetitorResult& res) {
      if (r != *c.dump_rep) return;
      const std::string stem = "rep" + std::to_string(r);
      auto d = open_out(out / (stem + "_data.csv"));
      write_observations(d, data);
      auto cv = open_out(out / (stem + "_curves.csv"));
      write_curves(cv, res, false);
      open_out(out / (stem + "_seed.txt")) << replicate_seed(mc.seed, r) << '\n';
      if (res.fed) {
        auto w = open_out(out / (stem + "_weights.csv"));
        write_weights_csv(w, res.fed->fed);
      }
    };
  }

  std::signal(SIGINT, on_interrupt);
  std::signal(SIGTERM, on_interrupt);
  MetricsReport report;
  int code = kExitOk;
  try {
    report = monte_carlo(mc, &g_stop, hook);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NumericalError) throw;
    std::cerr << "fatal: " << e.what() << '\n';
    code = kExitFatal;
  }
  const std::string sc = std::string(to_string(mc.spec.scenario));
  {
    auto f = open_out(out / ("replicates_" + sc + ".csv"));
    write_replicates_csv(f, report);
    auto s = open_out(out / ("summary_" + sc + ".csv"));
    write_summary_csv(s, report);
    auto t = open_out(out / ("truth_" + sc + ".csv"));
    t << "t,a,truth,se\n";
    for (const auto& [key, v] : report.truth)
      t << format_double(key.first) << ',' << key.second << ',' << format_double(v) << ','
        << format_double(report.truth_se.at(key)) << '\n';
    auto w = open_out(out / ("weights_" + sc + ".csv"));
    w << "t,a,site,mean_eta\n";
    for (const auto& [key, v] : report.mean_weights)
      for (std::size_t k = 0; k < v.size(); ++k)
        w << format_double(key.first) << ',' << key.second << ',' << k << ',' << format_double(v[k]) << '\n';
    auto fl = open_out(out / ("failures_" + sc + ".txt"));
    for (const auto& msg : report.failures) fl << msg << '\n';
  }
  std::cerr << "simulate: " << report.reps_completed << " of " << report.reps_requested << " replicates completed";
  if (report.failed_reps) std::cerr << ", " << report.failed_reps << " failed";
  if (report.interrupted) std::cerr << ", interrupted";
  std::cerr << '\n';
  if (code != kExitOk) return code;
  return report.degraded() ? kExitDegraded : kExitOk;
}

int cmd_estimate(const RunConfig& c) {
  const auto data = load_csv(c.data);
  require(!data.empty(), ErrorKind::IngestionError, "no observations in '" + c.data + "'");
  const auto grid = TimeGrid::regular(c.tau, c.step);
  echo_config(c);
  const fs::path out(c.out);
  const int K = num_sites(data);
  auto cfg = estimation_config(c);
  const bool single = K == 1;
  if (single) {
    std::cerr << "notice: one site in the data; only the target-only estimator is reported, FED skipped\n";
    cfg.fed.bootstrap = 0;
  }
  const auto res = run_competitors(data, grid, cfg, *c.seed);
  auto f = open_out(out / "curves.csv");
  write_curves(f, res, single);
  int code = kExitOk;
  if (!single && res.fed) {
    auto w = open_out(out / "weights.csv");
    write_weights_csv(w, res.fed->fed);
    auto fc = open_out(out / "fed_curve.csv");
    write_fed_curve(fc, res.fed->fed);
    if (!res.fed->fed.errors().empty()) code = kExitDegraded;
  }
  for (const auto& [m, why] : res.errors) {
    if (single && m != Method::TGT) continue;
    if (m == Method::FED_BOOT && cfg.fed.bootstrap == 0) continue;
    std::cerr << "warning: " << to_string(m) << " failed: " << why << '\n';
    code = kExitDegraded;
  }
  return code;
}

int write_coordinator_outputs(const RunConfig& c, const CoordinatorResult& res) {
  const fs::path out(c.out);
  auto fc = open_out(out / "fed_curve.csv");
  write_fed_curve(fc, res.result.fed);
  auto w = open_out(out / "weights.csv");
  write_weights_csv(w, res.result.fed);
  if (res.result.boot) {
    auto b = open_out(out / "fed_boot_curve.csv");
    write_fed_curve(b, *res.result.boot);
  }
  auto t = open_out(out / "transcript.jsonl");
  write_transcript(t, res.transcript);
  auto ev = open_out(out / "events.txt");
  for (const auto& e : res.events) {
    ev << e << '\n';
    std::cerr << "event: " << e << '\n';
  }
  bool dropped = false;
  for (const auto& e : res.events) dropped = dropped || e.find(" dropped:") != std::string::npos;
  return dropped || !res.result.fed.errors().empty() ? kExitDegraded : kExitOk;
}

int cmd_coordinator(const RunConfig& c) {
  const auto s = federation_settings(c);
  const Millis timeout(c.timeout_ms);
  const auto data = load_csv(c.data);
  echo_config(c);
  if (c.transport == "loopback") {
    auto [target, sources] = split_by_site(data);
    return write_coordinator_outputs(c, run_loopback_federation(target, sources, s, timeout));
  }
  if (c.connect.empty()) throw UsageError("--connect is required with the tcp transport");
  for (const auto& o : data)
    require(o.r == 0, ErrorKind::InvalidInput, "coordinator data must only hold target (r = 0) rows");
  std::vector<std::unique_ptr<Channel>> channels;
  std::vector<std::string> unreachable;
  for (const auto& ep : c.connect) {
    const auto [host, port] = host_port(ep);
    try {
      channels.push_back(tcp_connect(host, port, timeout));
    } catch (const Error& e) {
      unreachable.push_back("endpoint " + ep + " dropped: " + e.what());
    }
  }
  auto res = coordinator_run(data, channels, s, timeout);
  res.events.insert(res.events.begin(), unreachable.begin(), unreachable.end());
  return write_coordinator_outputs(c, res);
}

int cmd_site(const RunConfig& c) {
  const auto data = load_csv(c.data);
  const auto [host, port] = host_port(c.listen);
  const Millis timeout(c.timeout_ms);
  TcpListener listener(host, port);
  std::cerr << "site " << local_site_id(data) << " listening on " << host << ':' << listener.port() << '\n';
  auto ch = listener.accept(timeout);
  if (!ch) fail(ErrorKind::SiteUnavailable, "no coordinator connected within the timeout");
  const auto res = site_run(data, *ch, timeout);
  fs::create_directories(c.out);
  auto t = open_out(fs::path(c.out) / ("site" + std::to_string(res.site) + "_transcript.jsonl"));
  write_transcript(t, res.transcript);
  return kExitOk;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
  return f;
}

int cmd_report(const RunConfig& c) {
  if (c.input.empty()) throw UsageError("--input is required");
  std::ifstream in(c.input);
  if (!in) fail(ErrorKind::IngestionError, "cannot open '" + c.input + "'");
  std::string line;
  if (!std::getline(in, line) || line != "method,t,a,rep,estimate,se,ci_lo,ci_hi,truth")
    fail(ErrorKind::IngestionError, "expected a replicates CSV header");
  std::vector<RepRecord> recs;
  std::set<double> times;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split_fields(line);
    try {
      require(f.size() == 9, ErrorKind::IngestionError, "expected 9 fields");
      RepRecord r{method_from_string(f[0]), std::stod(f[1]), std::stoi(f[2]), std::stoul(f[3]), {}, std::stod(f[8])};
      r.estimate.theta = std::stod(f[4]);
      r.estimate.se = std::stod(f[5]);
      r.estimate.ci_lo = std::stod(f[6]);
      r.estimate.ci_hi = std::stod(f[7]);
      times.insert(r.t);
      recs.push_back(r);
    } catch (const std::exception& e) {
      fail(ErrorKind::IngestionError, "row " + std::to_string(row) + ": " + e.what());
    }
  }
  fs::create_directories(c.out);
  const auto rows = summarize(recs, std::vector<double>(times.begin(), times.end()));
  auto out = open_out(fs::path(c.out) / "report.csv");
  out << "method,t,a,reps,bias,rmse,rrmse,ci_width,cp\n";
  for (const auto& x : rows)
    out << to_string(x.method) << ',' << format_double(x.t) << ',' << x.a << ',' << x.reps << ','
        << format_double(x.bias) << ',' << format_double(x.rmse) << ',' << format_double(x.rrmse) << ','
        << format_double(x.ci_width) << ',' << format_double(x.cp) << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated causal survival analysis across multiple sites"};
  app.require_subcommand(1);
  RunConfig flags;
  std::string config_path;
  std::uint64_t seed = 0;
  std::size_t dump_rep = 0;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> bound;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file (flags override it)");
    sub->add_option("--out", flags.out, "output directory");
    bound.emplace_back(sub->add_option("--seed", seed, "64-bit root seed (required)"),
                       [&](RunConfig& c) { c.seed = seed; });
    bound.emplace_back(sub->get_option("--out"), [&](RunConfig& c) { c.out = flags.out; });
  };
  auto estimation = [&](CLI::App* sub) {
    bound.emplace_back(sub->add_option("--tau", flags.tau, "grid end"), [&](RunConfig& c) { c.tau = flags.tau; });
    bound.emplace_back(sub->add_option("--step", flags.step, "grid step"), [&](RunConfig& c) { c.step = flags.step; });
    bound.emplace_back(sub->add_option("--folds", flags.folds, "cross-fitting folds M"),
                       [&](RunConfig& c) { c.folds = flags.folds; });
    bound.emplace_back(sub->add_option("--eta-cap", flags.eta_cap, "cap on inverse weights"),
                       [&](RunConfig& c) { c.eta_cap = flags.eta_cap; });
    bound.emplace_back(sub->add_option("--lambda-grid", flags.lambda_grid, "penalty grid (multiplied by n)")->delimiter(','),
                       [&](RunConfig& c) { c.lambda_grid = flags.lambda_grid; });
    bound.emplace_back(sub->add_option("--lambda-cv-folds", flags.lambda_cv_folds, "folds for the penalty choice"),
                       [&](RunConfig& c) { c.lambda_cv_folds = flags.lambda_cv_folds; });
    bound.emplace_back(sub->add_option("--bootstrap", flags.bootstrap, "bootstrap replicates B (0 disables)"),
                       [&](RunConfig& c) { c.bootstrap = flags.bootstrap; });
    bound.emplace_back(sub->add_option("--learners", flags.learners, "survival learners: km,stratified_km,cox")->delimiter(','),
                       [&](RunConfig& c) { c.learners = flags.learners; });
  };

  auto* sim = app.add_subcommand("simulate", "Monte Carlo study of one scenario");
  common(sim);
  estimation(sim);
  bound.emplace_back(sim->add_option("--scenario", flags.scenario,
                                     "homogeneous, covariate_shift, outcome_shift, censoring_shift, all_shift"),
                     [&](RunConfig& c) { c.scenario = flags.scenario; });
  bound.emplace_back(sim->add_option("--sites", flags.sites, "number of sites K"), [&](RunConfig& c) { c.sites = flags.sites; });
  bound.emplace_back(sim->add_option("--n0", flags.n0, "target sample size"), [&](RunConfig& c) { c.n0 = flags.n0; });
  bound.emplace_back(sim->add_option("--nk", flags.nk, "sample size per source site"), [&](RunConfig& c) { c.nk = flags.nk; });
  bound.emplace_back(sim->add_option("--reps", flags.reps, "replicates"), [&](RunConfig& c) { c.reps = flags.reps; });
  bound.emplace_back(sim->add_option("--n-super", flags.n_super, "truth population size"),
                     [&](RunConfig& c) { c.n_super = flags.n_super; });
  bound.emplace_back(sim->add_option("--eval-times", flags.eval_times, "evaluation times")->delimiter(','),
                     [&](RunConfig& c) { c.eval_times = flags.eval_times; });
  bound.emplace_back(sim->add_option("--sharing", flags.sharing, "coarse or pooled"),
                     [&](RunConfig& c) { c.sharing = flags.sharing; });
  bound.emplace_back(sim->add_option("--dump-rep", dump_rep, "write data and curves of this replicate"),
                     [&](RunConfig& c) { c.dump_rep = dump_rep; });

  auto* est = app.add_subcommand("estimate", "All estimators on a multi-site CSV");
  common(est);
  estimation(est);
  bound.emplace_back(est->add_option("--data", flags.data, "observation CSV (x1..xd,a,y,delta,r)"),
                     [&](RunConfig& c) { c.data = flags.data; });
  bound.emplace_back(est->add_option("--sharing", flags.sharing, "coarse or pooled"),
                     [&](RunConfig& c) { c.sharing = flags.sharing; });

  auto* coord = app.add_subcommand("coordinator", "Federated run as the target site");
  common(coord);
  estimation(coord);
  bound.emplace_back(coord->add_option("--data", flags.data, "target-site CSV (all sites with --transport loopback)"),
                     [&](RunConfig& c) { c.data = flags.data; });
  bound.emplace_back(coord->add_option("--connect", flags.connect, "site endpoints host:port,...")->delimiter(','),
                     [&](RunConfig& c) { c.connect = flags.connect; });
  bound.emplace_back(coord->add_option("--transport", flags.transport, "tcp or loopback"),
                     [&](RunConfig& c) { c.transport = flags.transport; });
  bound.emplace_back(coord->add_option("--timeout-ms", flags.timeout_ms, "per-message timeout"),
                     [&](RunConfig& c) { c.timeout_ms = flags.timeout_ms; });

  auto* site = app.add_subcommand("site", "Serve one federated run as a source site");
  common(site);
  bound.emplace_back(site->add_option("--data", flags.data, "this site's CSV"), [&](RunConfig& c) { c.data = flags.data; });
  bound.emplace_back(site->add_option("--listen", flags.listen, "host:port to listen on"),
                     [&](RunConfig& c) { c.listen = flags.listen; });
  bound.emplace_back(site->add_option("--timeout-ms", flags.timeout_ms, "per-message timeout"),
                     [&](RunConfig& c) { c.timeout_ms = flags.timeout_ms; });

  auto* rep = app.add_subcommand("report", "Summary metrics from a replicates CSV");
  rep->add_option("--out", flags.out, "output directory");
  bound.emplace_back(rep->add_option("--input", flags.input, "replicates CSV written by simulate"),
                     [&](RunConfig& c) { c.input = flags.input; });
  bound.emplace_back(rep->get_option("--out"), [&](RunConfig& c) { c.out = flags.out; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitFatal;
  }

  RunConfig cfg;
  try {
    cfg.command = app.get_subcommands().front()->get_name();
    if (!config_path.empty()) apply_config_file(config_path, cfg);
    for (auto& [opt, set] : bound)
      if (opt->count() > 0) set(cfg);
    validate(cfg);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitFatal;
  }

  try {
    if (cfg.command == "simulate") return cmd_simulate(cfg);
    if (cfg.command == "estimate") return cmd_estimate(cfg);
    if (cfg.command == "coordinator") return cmd_coordinator(cfg);
    if (cfg.command == "site") return cmd_site(cfg);
    return cmd_report(cfg);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  }
  return kExitFatal;
}
