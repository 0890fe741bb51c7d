#pragma once

// Wire format of the federation: one JSON object per line,
//   {"v": <protocol version>, "kind": <message kind>, "site": <id>, "payload": {...}}
// Doubles are written in shortest round-trip form, so every value is bit-exact
// after decoding.

#include <json.hpp>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "fedsurv/errors.hpp"
#include "fedsurv/fedopt/aggregate.hpp"
#include "fedsurv/nuisance/bundle.hpp"

namespace fedsurv {

inline constexpr int kProtocolVersion = 1;

enum class MessageKind { Hello, ModelBroadcast, CovariateSummary, AugmentationMoments, Ack, Error };

inline std::string to_string(MessageKind k) {
  switch (k) {
    case MessageKind::Hello: return "Hello";
    case MessageKind::ModelBroadcast: return "ModelBroadcast";
    case MessageKind::CovariateSummary: return "CovariateSummary";
    case MessageKind::AugmentationMoments: return "AugmentationMoments";
    case MessageKind::Ack: return "Ack";
    case MessageKind::Error: return "Error";
  }
  return "?";
}

inline MessageKind message_kind_from_string(const std::string& s) {
  for (auto k : {MessageKind::Hello, MessageKind::ModelBroadcast, MessageKind::CovariateSummary,
                 MessageKind::AugmentationMoments, MessageKind::Ack, MessageKind::Error})
    if (to_string(k) == s) return k;
  fail(ErrorKind::ProtocolError, "unknown message kind '" + s + "'");
}

struct Message {
  int v = kProtocolVersion;
  MessageKind kind = MessageKind::Ack;
  int site = 0;
  nlohmann::json payload = nlohmann::json::object();
};

inline std::string encode(const Message& m) {
  nlohmann::json j{{"v", m.v}, {"kind", to_string(m.kind)}, {"site", m.site}, {"payload", m.payload}};
  return j.dump();
}

inline Message decode(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ProtocolError, std::string("malformed message: ") + e.what());
  }
  if (!j.is_object() || !j.contains("v") || !j.contains("kind") || !j.contains("site") || !j.contains("payload") ||
      !j["v"].is_number_integer() || !j["kind"].is_string() || !j["site"].is_number_integer() ||
      !j["payload"].is_object())
    fail(ErrorKind::ProtocolError, "message envelope must be {v:int, kind:string, site:int, payload:object}");
  Message m;
  m.v = j["v"].get<int>();
  m.kind = message_kind_from_string(j["kind"].get<std::string>());
  m.site = j["site"].get<int>();
  m.payload = std::move(j["payload"]);
  return m;
}

// ---- payload bodies ------------------------------------------------------

inline nlohmann::json moments_json(const Moments& m) { return {m.w, m.m1, m.m2, m.c11, m.c22, m.c12}; }

inline Moments moments_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 6) fail(ErrorKind::ProtocolError, "moments must be a 6-element array");
  Moments m;
  m.w = j[0].get<double>();
  m.m1 = j[1].get<double>();
  m.m2 = j[2].get<double>();
  m.c11 = j[3].get<double>();
  m.c22 = j[4].get<double>();
  m.c12 = j[5].get<double>();
  return m;
}

inline nlohmann::json cells_json(const std::vector<Moments>& cells) {
  auto j = nlohmann::json::array();
  for (const auto& m : cells) j.push_back(moments_json(m));
  return j;
}

inline std::vector<Moments> cells_from_json(const nlohmann::json& j) {
  std::vector<Moments> out;
  for (const auto& c : j) out.push_back(moments_from_json(c));
  return out;
}

inline nlohmann::json site_moments_json(const SiteMoments& s) {
  nlohmann::json j{{"site", s.site}, {"rows", s.rows}, {"full", cells_json(s.full)}};
  j["cv"] = nlohmann::json::array();
  for (const auto& f : s.cv) j["cv"].push_back(cells_json(f));
  j["boot"] = nlohmann::json::array();
  for (const auto& b : s.boot) j["boot"].push_back(cells_json(b));
  return j;
}

inline SiteMoments site_moments_from_json(const nlohmann::json& j) {
  try {
    SiteMoments s;
    s.site = j.at("site").get<int>();
    s.rows = j.at("rows").get<std::size_t>();
    s.full = cells_from_json(j.at("full"));
    for (const auto& f : j.at("cv")) s.cv.push_back(cells_from_json(f));
    for (const auto& b : j.at("boot")) s.boot.push_back(cells_from_json(b));
    require(s.rows >= 1, ErrorKind::ProtocolError, "moments need at least one row");
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ProtocolError, std::string("bad moments payload: ") + e.what());
  }
}

inline nlohmann::json survival_model_json(const SurvivalModel& m) {
  nlohmann::json j{{"learner", std::string(to_string(m.kind))},
                   {"outcome", m.outcome == Outcome::Event ? "event" : "censoring"},
                   {"marginal", m.marginal},
                   {"strata", {m.strata[0], m.strata[1]}},
                   {"degenerate", m.degenerate}};
  if (m.cox) {
    j["cox"] = {{"beta", m.cox->beta},
                {"center", m.cox->center},
                {"num_covariates", m.cox->feature_spec.num_covariates},
                {"baseline_cumhaz", m.cox->baseline_cumhaz.values}};
  }
  return j;
}

inline SurvivalModel survival_model_from_json(const nlohmann::json& j, const TimeGrid& grid) {
  try {
    SurvivalModel m;
    m.kind = learner_from_string(j.at("learner").get<std::string>());
    m.outcome = j.at("outcome").get<std::string>() == "event" ? Outcome::Event : Outcome::Censoring;
    m.grid = grid;
    m.marginal = j.at("marginal").get<std::vector<double>>();
    m.strata[0] = j.at("strata").at(0).get<std::vector<double>>();
    m.strata[1] = j.at("strata").at(1).get<std::vector<double>>();
    m.degenerate = j.at("degenerate").get<bool>();
    if (j.contains("cox")) {
      CoxModel c;
      const auto& cj = j["cox"];
      c.beta = cj.at("beta").get<std::vector<double>>();
      c.center = cj.at("center").get<std::vector<double>>();
      c.feature_spec.num_covariates = cj.at("num_covariates").get<std::size_t>();
      c.baseline_cumhaz = StepCurve{grid, cj.at("baseline_cumhaz").get<std::vector<double>>(), CurveKind::CumHazard};
      require(c.baseline_cumhaz.values.size() == grid.size(), ErrorKind::ProtocolError, "baseline hazard off grid");
      m.cox = std::move(c);
    }
    require(m.kind != SurvivalLearner::Cox || m.cox.has_value(), ErrorKind::ProtocolError, "Cox learner without model");
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ProtocolError, std::string("bad survival model payload: ") + e.what());
  }
}

/// Settings the coordinator imposes on every site so that all parties use one configuration.
struct FederationSettings {
  TimeGrid grid;
  std::size_t folds = 5;
  double eta_cap = 20.0;
  EnsembleOptions ensemble;
  FedConfig fed;
};

inline nlohmann::json settings_json(const FederationSettings& s) {
  std::vector<std::string> cands;
  for (auto c : s.ensemble.candidates) cands.emplace_back(to_string(c));
  return {{"grid", std::vector<double>(s.grid.points().begin(), s.grid.points().end())},
          {"folds", s.folds},
          {"eta_cap", s.eta_cap},
          {"seed", s.fed.seed},
          {"lambda_cv_folds", s.fed.cv_folds},
          {"bootstrap", s.fed.bootstrap},
          {"ensemble", {{"cv_folds", s.ensemble.cv_folds},
                        {"candidates", cands},
                        {"brier_censoring_floor", s.ensemble.brier_censoring_floor}}}};
}

inline FederationSettings settings_from_json(const nlohmann::json& j) {
  try {
    FederationSettings s;
    s.grid = TimeGrid(j.at("grid").get<std::vector<double>>());
    s.folds = j.at("folds").get<std::size_t>();
    s.eta_cap = j.at("eta_cap").get<double>();
    s.fed.seed = j.at("seed").get<std::uint64_t>();
    s.fed.cv_folds = j.at("lambda_cv_folds").get<std::size_t>();
    s.fed.bootstrap = j.at("bootstrap").get<std::size_t>();
    const auto& e = j.at("ensemble");
    s.ensemble.cv_folds = e.at("cv_folds").get<std::size_t>();
    s.ensemble.candidates.clear();
    for (const auto& c : e.at("candidates")) s.ensemble.candidates.push_back(learner_from_string(c.get<std::string>()));
    s.ensemble.brier_censoring_floor = e.at("brier_censoring_floor").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ProtocolError, std::string("bad settings payload: ") + e.what());
  }
}

// ---- privacy audit ---------------------------------------------------------

/// Every key a payload may carry, across all message kinds. None of them holds
/// per-observation data: moments are per (t, a) cell, summaries are per site.
inline const std::set<std::string>& allowed_payload_keys() {
  static const std::set<std::string> keys{
      // ModelBroadcast
      "settings", "grid", "folds", "eta_cap", "seed", "lambda_cv_folds", "bootstrap", "ensemble", "cv_folds",
      "candidates", "brier_censoring_floor", "model", "learner", "outcome", "marginal", "strata", "degenerate", "cox",
      "beta", "center", "num_covariates", "baseline_cumhaz", "target_summary",
      // CovariateSummary
      "site", "n", "mean", "cov",
      // AugmentationMoments
      "moments", "rows", "full", "cv", "boot", "warnings",
      // Error
      "message", "error_kind"};
  return keys;
}

inline void collect_keys(const nlohmann::json& j, const std::string& path, std::vector<std::string>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      out.push_back(path + "/" + k);
      collect_keys(v, path + "/" + k, out);
    }
  } else if (j.is_array()) {
    for (const auto& v : j) collect_keys(v, path + "[]", out);
  }
}

/// Payload fields of a message that are not on the allowlist, plus any numeric
/// array in a source message as long as the site's row count (a per-observation vector).
inline std::vector<std::string> audit_message(const Message& m, std::size_t site_rows = 0) {
  std::vector<std::string> keys, bad;
  collect_keys(m.payload, "", keys);
  std::set<std::string> seen(keys.begin(), keys.end());
  for (const auto& path : seen) {
    const auto leaf = path.substr(path.find_last_of('/') + 1);
    if (!allowed_payload_keys().count(leaf)) bad.push_back(to_string(m.kind) + ": field " + path);
  }
  if (site_rows > 1 && m.kind != MessageKind::ModelBroadcast) {
    std::function<void(const nlohmann::json&, const std::string&)> scan = [&](const nlohmann::json& j,
                                                                              const std::string& p) {
      if (j.is_array() && j.size() == site_rows && !j.empty() && j[0].is_number())
        bad.push_back(to_string(m.kind) + ": per-observation-sized array at " + p);
      if (j.is_object())
        for (const auto& [k, v] : j.items()) scan(v, p + "/" + k);
      if (j.is_array())
        for (const auto& v : j) scan(v, p + "[]");
    };
    scan(m.payload, "");
  }
  return bad;
}

}  // namespace fedsurv
