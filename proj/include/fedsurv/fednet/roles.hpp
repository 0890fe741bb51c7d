#pragma once

// Coordinator (target site) and source-site roles of the federation.
//
// Per connection: site -> Hello; coordinator -> ModelBroadcast; site -> CovariateSummary,
// AugmentationMoments (or Error); coordinator -> Ack. Sites never send per-observation data.

#include <algorithm>
#include <array>
#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "fedsurv/fednet/protocol.hpp"
#include "fedsurv/fednet/transport.hpp"

namespace fedsurv {

inline BundleOptions federation_bundle_options(const FederationSettings& s) {
  BundleOptions opt;
  opt.sharing = Sharing::CoarseOnly;
  opt.eta_cap = s.eta_cap;
  opt.ensemble = s.ensemble;
  opt.own_site_survival = false;
  return opt;
}

// ---- target side -----------------------------------------------------------

struct TargetPreparation {
  SurvivalModel s0_full;
  SiteCovariateSummary summary;
  SiteMoments moments;
  std::vector<std::string> warnings;
};

/// Target-site nuisances, the full-target outcome model to broadcast, and the target moments.
inline TargetPreparation prepare_target(const Dataset& target, const FederationSettings& s) {
  require(!target.empty(), ErrorKind::EmptyTarget, "target site has no observations");
  for (const auto& o : target) require(o.r == 0, ErrorKind::InvalidInput, "target data must only hold site 0 rows");
  const auto opt = federation_bundle_options(s);
  const auto seed = s.fed.seed;
  const auto folds = make_folds(target, s.folds, seed);
  NuisanceBundle b;
  b.eta_cap = opt.eta_cap;
  b.allocate(target.size(), s.grid, 1, true, false, false);
  TargetPreparation out;
  out.s0_full = fit_target_survival(target, folds, opt, seed, b);
  fit_site_nuisance(target, folds, 0, &out.s0_full, RatioReference{}, opt, seed, b);
  b.s0_full = out.s0_full;

  InfluenceTable table(s.grid, target.size());
  for (int a = 0; a < 2; ++a) table.insert(eif_target(target, b, a));
  out.moments = site_moments(target_values(table), s.fed.moment_plan());
  std::vector<std::size_t> all(target.size());
  std::iota(all.begin(), all.end(), 0);
  out.summary = summarize_covariates(RowView(target, all), 0);
  out.warnings = b.warnings;
  return out;
}

// ---- source side -----------------------------------------------------------

struct SiteComputation {
  SiteCovariateSummary summary;
  SiteMoments moments;
  std::array<bool, 2> degenerate{false, false};  // arm without rows: augmentation identically zero
  std::vector<std::string> warnings;
};

/// Local cross-fitting at source site k and the moments of its transported augmentation term.
inline SiteValues source_site_values(const Dataset& local, int k, const SurvivalModel& s0_full,
                                     const SiteCovariateSummary& target_summary, const FederationSettings& s,
                                     std::vector<std::string>* warnings = nullptr) {
  const auto opt = federation_bundle_options(s);
  const auto seed = s.fed.seed;
  const auto folds = make_folds(local, s.folds, seed);
  NuisanceBundle b;
  b.eta_cap = opt.eta_cap;
  b.allocate(local.size(), s.grid, k + 1, true, false, false);
  RatioReference ref;
  ref.target_summary = target_summary;
  fit_site_nuisance(local, folds, k, &s0_full, ref, opt, seed, b);
  if (warnings) *warnings = b.warnings;

  const std::size_t G = s.grid.size();
  SiteValues v;
  v.site = k;
  v.rows = local.size();
  v.cells = 2 * G;
  v.x1.assign(v.cells * v.rows, 0.0);
  std::vector<double> col(G);
  for (int a = 0; a < 2; ++a)
    for (std::size_t i = 0; i < local.size(); ++i) {
      detail::augmentation_curve(local[i], a, b.pi(i, a), s.grid, b.s_target.at(i, a), b.g_own.at(i, a), col);
      const double w = b.omega[i];
      for (std::size_t g = 0; g < G; ++g) v.x1[(static_cast<std::size_t>(a) * G + g) * v.rows + i] = w * col[g];
    }
  return v;
}

inline int local_site_id(const Dataset& local) {
  require(!local.empty(), ErrorKind::EmptySite, "site has no observations");
  const int k = local.front().r;
  require(k >= 1, ErrorKind::InvalidInput, "source data must carry a site id r >= 1");
  for (const auto& o : local) require(o.r == k, ErrorKind::InvalidInput, "source data mixes several site ids");
  return k;
}

inline SiteComputation compute_site(const Dataset& local, const SurvivalModel& s0_full,
                                    const SiteCovariateSummary& target_summary, const FederationSettings& s) {
  const int k = local_site_id(local);
  SiteComputation out;
  const auto values = source_site_values(local, k, s0_full, target_summary, s, &out.warnings);
  out.moments = site_moments(values, s.fed.moment_plan());
  std::vector<std::size_t> all(local.size());
  std::iota(all.begin(), all.end(), 0);
  out.summary = summarize_covariates(RowView(local, all), k);
  for (int a = 0; a < 2; ++a)
    out.degenerate[static_cast<std::size_t>(a)] =
        std::none_of(local.begin(), local.end(), [&](const Observation& o) { return o.a == a; });
  return out;
}

// ---- transcript --------------------------------------------------------------

struct TranscriptEntry {
  std::string direction;  // "send" or "recv", from the recording party's view
  int peer = 0;           // site id of the other party (0 = coordinator)
  std::string line;
};

inline void write_transcript(std::ostream& out, const std::vector<TranscriptEntry>& t) {
  for (const auto& e : t) {
    nlohmann::json j{{"direction", e.direction}, {"peer", e.peer}};
    try {
      j["message"] = nlohmann::json::parse(e.line);
    } catch (const nlohmann::json::exception&) {
      j["raw"] = e.line;
    }
    out << j.dump() << '\n';
  }
}

namespace detail {

class RecordingChannel {
 public:
  RecordingChannel(Channel& ch, std::vector<TranscriptEntry>& log, Millis timeout)
      : ch_(ch), log_(log), timeout_(timeout) {}
  int peer = 0;

  void send(const Message& m) {
    const auto line = encode(m);
    log_.push_back({"send", peer, line});
    ch_.send_line(line);
  }

  Message receive(const std::string& waiting_for) {
    auto line = ch_.receive_line(timeout_);
    if (!line) fail(ErrorKind::SiteUnavailable, "timed out waiting for " + waiting_for);
    log_.push_back({"recv", peer, *line});
    auto m = decode(*line);
    if (m.v != kProtocolVersion)
      fail(ErrorKind::ProtocolError, "protocol version " + std::to_string(m.v) + ", expected " +
                                         std::to_string(kProtocolVersion));
    return m;
  }

 private:
  Channel& ch_;
  std::vector<TranscriptEntry>& log_;
  Millis timeout_;
};

inline void expect_kind(const Message& m, MessageKind k) {
  if (m.kind == MessageKind::Error) {
    const std::string kind = m.payload.value("error_kind", "");
    fail(ErrorKind::SiteUnavailable,
         "site reported " + (kind.empty() ? std::string("an error") : kind) + ": " + m.payload.value("message", ""));
  }
  if (m.kind != k)
    fail(ErrorKind::ProtocolError, "expected " + to_string(k) + ", received " + to_string(m.kind));
}

}  // namespace detail

// ---- site role -----------------------------------------------------------------

struct SiteRunResult {
  int site = 0;
  bool acknowledged = false;
  std::vector<TranscriptEntry> transcript;
};

/// Serves one federation round over `ch`. Local failures are reported to the
/// coordinator as an Error message and rethrown.
inline SiteRunResult site_run(const Dataset& local, Channel& ch, Millis timeout = Millis(60000)) {
  SiteRunResult res;
  res.site = local_site_id(local);
  detail::RecordingChannel rc(ch, res.transcript, timeout);
  rc.send({kProtocolVersion, MessageKind::Hello, res.site, nlohmann::json::object()});
  const auto bc = rc.receive("ModelBroadcast");
  detail::expect_kind(bc, MessageKind::ModelBroadcast);
  try {
    const auto settings = settings_from_json(bc.payload.at("settings"));
    const auto s0 = survival_model_from_json(bc.payload.at("model"), settings.grid);
    const auto target_summary = bc.payload.at("target_summary").get<SiteCovariateSummary>();
    const auto comp = compute_site(local, s0, target_summary, settings);
    rc.send({kProtocolVersion, MessageKind::CovariateSummary, res.site, nlohmann::json(comp.summary)});
    rc.send({kProtocolVersion, MessageKind::AugmentationMoments, res.site,
             {{"moments", site_moments_json(comp.moments)},
              {"degenerate", {comp.degenerate[0], comp.degenerate[1]}},
              {"warnings", comp.warnings}}});
  } catch (const Error& e) {
    rc.send({kProtocolVersion, MessageKind::Error, res.site,
             {{"message", e.message()}, {"error_kind", std::string(to_string(e.kind()))}}});
    throw;
  } catch (const nlohmann::json::exception& e) {
    const std::string why = std::string("bad ModelBroadcast: ") + e.what();
    rc.send({kProtocolVersion, MessageKind::Error, res.site,
             {{"message", why}, {"error_kind", std::string(to_string(ErrorKind::ProtocolError))}}});
    fail(ErrorKind::ProtocolError, why);
  }
  const auto ack = rc.receive("Ack");
  detail::expect_kind(ack, MessageKind::Ack);
  res.acknowledged = true;
  return res;
}

// ---- coordinator role ----------------------------------------------------------

struct SiteReport {
  int site = -1;
  SiteCovariateSummary summary;
  SiteMoments moments;
  std::array<bool, 2> degenerate{false, false};
  std::vector<std::string> warnings;
};

struct CoordinatorResult {
  FedInputs inputs;
  FedResult result;
  std::vector<int> sites;    // contributing source sites, sorted
  std::vector<std::string> events;  // dropped sites and other protocol events
  std::vector<TranscriptEntry> transcript;
};

namespace detail {

struct SessionOutcome {
  std::optional<SiteReport> report;
  std::string error;
  int peer = -1;
  std::vector<TranscriptEntry> transcript;
};

inline SessionOutcome coordinator_session(Channel& ch, const nlohmann::json& broadcast, const FederationSettings& s,
                                          Millis timeout) {
  SessionOutcome out;
  RecordingChannel rc(ch, out.transcript, timeout);
  try {
    const auto hello = rc.receive("Hello");
    expect_kind(hello, MessageKind::Hello);
    require(hello.site >= 1, ErrorKind::ProtocolError, "source sites must have id >= 1");
    out.peer = rc.peer = hello.site;
    for (auto& e : out.transcript) e.peer = hello.site;
    rc.send({kProtocolVersion, MessageKind::ModelBroadcast, 0, broadcast});

    SiteReport rep;
    rep.site = hello.site;
    const auto cs = rc.receive("CovariateSummary");
    expect_kind(cs, MessageKind::CovariateSummary);
    require(cs.site == rep.site, ErrorKind::ProtocolError, "site id changed within a connection");
    try {
      rep.summary = cs.payload.get<SiteCovariateSummary>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::ProtocolError, std::string("bad covariate summary: ") + e.what());
    }
    const auto am = rc.receive("AugmentationMoments");
    expect_kind(am, MessageKind::AugmentationMoments);
    require(am.site == rep.site, ErrorKind::ProtocolError, "site id changed within a connection");
    if (!am.payload.contains("moments")) fail(ErrorKind::ProtocolError, "AugmentationMoments without moments");
    rep.moments = site_moments_from_json(am.payload["moments"]);
    const std::size_t cells = 2 * s.grid.size();
    auto well_formed = [&](const std::vector<Moments>& v) { return v.size() == cells; };
    require(rep.moments.site == rep.site && well_formed(rep.moments.full) &&
                rep.moments.cv.size() == s.fed.cv_folds && rep.moments.boot.size() == s.fed.bootstrap &&
                std::all_of(rep.moments.cv.begin(), rep.moments.cv.end(), well_formed) &&
                std::all_of(rep.moments.boot.begin(), rep.moments.boot.end(), well_formed),
            ErrorKind::ProtocolError, "moments do not match the broadcast settings");
    for (const auto& c : rep.moments.full)
      require(std::isfinite(c.m1) && std::isfinite(c.c11), ErrorKind::ProtocolError, "non-finite moments");
    try {
      if (am.payload.contains("degenerate")) {
        rep.degenerate[0] = am.payload["degenerate"].at(0).get<bool>();
        rep.degenerate[1] = am.payload["degenerate"].at(1).get<bool>();
      }
      if (am.payload.contains("warnings")) rep.warnings = am.payload["warnings"].get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::ProtocolError, std::string("bad moments payload: ") + e.what());
    }
    rc.send({kProtocolVersion, MessageKind::Ack, 0, nlohmann::json::object()});
    out.report = std::move(rep);
  } catch (const Error& e) {
    out.error = e.what();
    try {
      if (e.kind() == ErrorKind::ProtocolError)
        rc.send({kProtocolVersion, MessageKind::Error, 0,
                 {{"message", e.message()}, {"error_kind", std::string(to_string(e.kind()))}}});
    } catch (const Error&) {
    }
  }
  return out;
}

}  // namespace detail

/// Runs one federation round with every connected site and solves the federated
/// weights over the sites that completed it. Sites that time out, disconnect,
/// report an error or violate the protocol are dropped and logged.
inline CoordinatorResult coordinator_run(const Dataset& target, std::vector<std::unique_ptr<Channel>>& sites,
                                         const FederationSettings& s, Millis timeout = Millis(60000)) {
  const auto prep = prepare_target(target, s);
  const nlohmann::json broadcast{{"settings", settings_json(s)},
                                 {"model", survival_model_json(prep.s0_full)},
                                 {"target_summary", nlohmann::json(prep.summary)}};

  std::vector<detail::SessionOutcome> outcomes(sites.size());
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < sites.size(); ++i)
    workers.emplace_back([&, i] { outcomes[i] = detail::coordinator_session(*sites[i], broadcast, s, timeout); });
  for (auto& w : workers) w.join();

  CoordinatorResult res;
  std::sort(outcomes.begin(), outcomes.end(),
            [](const auto& x, const auto& y) { return x.peer < y.peer; });
  std::map<int, SiteReport> reports;
  for (auto& o : outcomes) {
    const std::string who = o.peer >= 0 ? "site " + std::to_string(o.peer) : "unidentified connection";
    if (!o.report) {
      res.events.push_back(who + " dropped: " + o.error);
    } else if (reports.count(o.report->site)) {
      res.events.push_back(who + " dropped: ProtocolError: duplicate site id");
    } else {
      for (const auto& w : o.report->warnings) res.events.push_back(who + " warning: " + w);
      reports.emplace(o.report->site, std::move(*o.report));
    }
    res.transcript.insert(res.transcript.end(), o.transcript.begin(), o.transcript.end());
  }

  res.inputs.grid = s.grid;
  res.inputs.target = prep.moments;
  for (auto& [k, r] : reports) {
    res.sites.push_back(k);
    res.inputs.sources.push_back(std::move(r.moments));
  }
  res.result = fed_curves(res.inputs, s.fed);
  return res;
}

/// Privacy audit over a whole transcript: payload fields outside the allowlist
/// and per-observation-sized numeric arrays in site messages.
inline std::vector<std::string> audit_transcript(const std::vector<TranscriptEntry>& t,
                                                 const std::map<int, std::size_t>& site_rows = {}) {
  std::vector<std::string> bad;
  for (const auto& e : t) {
    const auto m = decode(e.line);
    const bool from_site = m.site >= 1;
    const auto it = site_rows.find(m.site);
    const auto rows = from_site && it != site_rows.end() ? it->second : 0;
    for (auto& b : audit_message(m, rows)) bad.push_back("site " + std::to_string(m.site) + " " + b);
  }
  return bad;
}

/// In-process federation over loopback channels: one thread per source site.
inline CoordinatorResult run_loopback_federation(const Dataset& target, const std::vector<Dataset>& sources,
                                                 const FederationSettings& s, Millis timeout = Millis(60000)) {
  std::vector<std::unique_ptr<Channel>> coord_ends, site_ends;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    auto [c, e] = loopback_pair();
    coord_ends.push_back(std::move(c));
    site_ends.push_back(std::move(e));
  }
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < sources.size(); ++i)
    threads.emplace_back([&, i] {
      try {
        site_run(sources[i], *site_ends[i], timeout);
      } catch (const Error&) {
        // the coordinator records the failure from its side of the channel
      }
      site_ends[i]->close();
    });
  CoordinatorResult res;
  try {
    res = coordinator_run(target, coord_ends, s, timeout);
  } catch (...) {
    for (auto& c : coord_ends) c->close();
    for (auto& t : threads) t.join();
    throw;
  }
  for (auto& c : coord_ends) c->close();
  for (auto& t : threads) t.join();
  return res;
}

/// Splits a multi-site dataset into the target part and one dataset per source site.
inline std::pair<Dataset, std::vector<Dataset>> split_by_site(const Dataset& data) {
  const int K = num_sites(data);
  Dataset target;
  std::vector<Dataset> sources(static_cast<std::size_t>(std::max(K - 1, 0)));
  for (const auto& o : data) (o.r == 0 ? target : sources[static_cast<std::size_t>(o.r - 1)]).push_back(o);
  sources.erase(std::remove_if(sources.begin(), sources.end(), [](const Dataset& d) { return d.empty(); }),
                sources.end());
  return {std::move(target), std::move(sources)};
}

}  // namespace fedsurv
