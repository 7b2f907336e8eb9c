#include "ragfire/gateway.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "httplib.h"
#include "json.hpp"

#include "ragfire/anchors_io.hpp"

namespace ragfire {

using nlohmann::json;

FirewallMode mode_from_name(std::string_view name) {
  if (name == "detect-only") return FirewallMode::DetectOnly;
  if (name == "enforce") return FirewallMode::Enforce;
  if (name == "mitigate") return FirewallMode::Mitigate;
  throw Error(ErrorCode::ConfigInvalid, "unknown mode '" + std::string(name) + "'");
}

const char* mode_name(FirewallMode mode) {
  switch (mode) {
    case FirewallMode::DetectOnly: return "detect-only";
    case FirewallMode::Enforce: return "enforce";
    case FirewallMode::Mitigate: return "mitigate";
  }
  return "unknown";
}

FirewallConfig FirewallConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigInvalid, "cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("config parse error: ") + e.what());
  }

  FirewallConfig cfg;
  try {
    if (j.contains("backend")) {
      const json& b = j["backend"];
      cfg.backend.layers = b.value("layers", cfg.backend.layers);
      cfg.backend.width = b.value("width", cfg.backend.width);
      cfg.backend.heads = b.value("heads", cfg.backend.heads);
      cfg.backend.context = b.value("context", cfg.backend.context);
      cfg.backend.seed = b.value("seed", cfg.backend.seed);
      cfg.weights_file = b.value("weights_file", std::string());
      cfg.pretrain_backend = b.value("pretrain", cfg.pretrain_backend);
      cfg.pretrain.steps = b.value("pretrain_steps", cfg.pretrain.steps);
      cfg.pretrain.batch = b.value("pretrain_batch", cfg.pretrain.batch);
      cfg.pretrain.learning_rate = b.value("pretrain_lr", cfg.pretrain.learning_rate);
    }
    if (j.contains("layer_set")) cfg.layer_set = j["layer_set"].get<std::vector<int>>();
    cfg.pooling = pooling_from_name(j.value("pooling", "mean"));
    cfg.mode = mode_from_name(j.value("mode", "enforce"));
    cfg.retrieval_k = j.value("k", cfg.retrieval_k);
    cfg.percentile = j.value("percentile", cfg.percentile);
    cfg.epsilon = j.value("epsilon", cfg.epsilon);
    cfg.alpha = j.value("alpha", cfg.alpha);
    cfg.audit_path = j.value("audit_path", cfg.audit_path);
    cfg.refusal_text = j.value("refusal_text", cfg.refusal_text);
    cfg.system_prompt = j.value("system_prompt", cfg.system_prompt);
    cfg.max_answer_tokens = j.value("max_answer_tokens", cfg.max_answer_tokens);
    cfg.corpus_file = j.value("corpus", cfg.corpus_file);
    if (j.contains("server")) {
      cfg.host = j["server"].value("host", cfg.host);
      cfg.port = j["server"].value("port", cfg.port);
    }
    if (j.contains("mitigate_risks")) {
      cfg.mitigate_risks = j["mitigate_risks"].get<std::vector<std::string>>();
    }
    if (j.contains("roles")) {
      for (const auto& [name, r] : j["roles"].items()) {
        RoleConfig rc;
        rc.anchors_file = r.value("anchors", std::string());
        if (r.contains("tau")) rc.tau = r["tau"].get<double>();
        if (r.contains("tau_doc")) rc.tau_doc = r["tau_doc"].get<double>();
        rc.classifier_file = r.value("classifier", std::string());
        rc.pronet_file = r.value("pronet", std::string());
        rc.token = r.value("token", std::string());
        cfg.roles[name] = rc;
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("config field error: ") + e.what());
  }
  return cfg;
}

std::string AuditRecord::to_json_line() const {
  json j;
  j["record_id"] = record_id;
  j["request_id"] = request_id;
  j["ts_ms"] = timestamp_ms;
  j["role"] = role;
  j["direction"] = direction;
  j["decision"] = decision;
  j["aggregate"] = aggregate;
  if (threshold.has_value()) j["threshold"] = *threshold;
  if (risk_label.has_value()) j["risk_label"] = *risk_label;
  j["action"] = action;
  if (!detail.empty()) j["detail"] = detail;
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

Firewall::Firewall(FirewallConfig config, std::shared_ptr<ActivationBackend> backend,
                   std::map<std::string, RoleState> roles)
    : config_(std::move(config)), backend_(std::move(backend)), roles_(std::move(roles)) {
  for (const auto& [role, state] : roles_) {
    if (state.anchors == nullptr || state.anchors->query_anchors.empty()) {
      throw Error(ErrorCode::ConfigInvalid, "role '" + role + "' has no anchors");
    }
    if (config_.mode == FirewallMode::Mitigate && state.pronet == nullptr) {
      throw Error(ErrorCode::ConfigInvalid,
                  "mode 'mitigate' requires a ProNet for role '" + role + "'");
    }
  }
  if (!config_.audit_path.empty()) {
    audit_file_ = std::make_unique<std::ofstream>(config_.audit_path, std::ios::app);
    if (!*audit_file_) {
      throw Error(ErrorCode::ConfigInvalid, "cannot open audit file " + config_.audit_path);
    }
  }
  if (!config_.corpus_file.empty()) {
    const auto docs = load_corpus_file(config_.corpus_file);
    store_.ingest(docs);
  }
}

Firewall Firewall::from_config(const FirewallConfig& config) {
  std::shared_ptr<ActivationBackend> backend;
  if (!config.weights_file.empty() && std::ifstream(config.weights_file).good()) {
    backend = std::make_shared<ToyLm>(ToyLm::load_file(config.weights_file));
  } else if (config.pretrain_backend) {
    const SyntheticCorpus corpus = build_synthetic_corpus(500, 150, 1234);
    std::vector<std::string> pool;
    for (const auto& role : corpus.roles) {
      const auto& qs = corpus.queries.at(role);
      pool.insert(pool.end(), qs.begin(), qs.end());
      for (const auto& d : corpus.documents.at(role)) pool.push_back(d.text);
    }
    auto lm = std::make_shared<ToyLm>(ToyLm::pretrained(config.backend, pool, config.pretrain));
    if (!config.weights_file.empty()) lm->save_file(config.weights_file);
    backend = std::move(lm);
  } else {
    backend = std::make_shared<ToyLm>(config.backend);
  }

  std::map<std::string, RoleState> roles;
  for (const auto& [name, rc] : config.roles) {
    RoleState state;
    if (rc.anchors_file.empty()) {
      throw Error(ErrorCode::ConfigInvalid, "role '" + name + "' is missing an anchors file");
    }
    state.anchors = std::make_shared<const AnchorSet>(load_anchors_file(rc.anchors_file));
    if (state.anchors->backend_fingerprint != backend->fingerprint()) {
      throw Error(ErrorCode::FingerprintMismatch,
                  "anchors for role '" + name + "' were built by a different backend");
    }
    state.tau = rc.tau;
    state.tau_doc = rc.tau_doc;
    if (!rc.classifier_file.empty()) {
      state.classifier =
          std::make_shared<const DecisionTree>(DecisionTree::load_file(rc.classifier_file));
    }
    if (!rc.pronet_file.empty()) {
      state.pronet = std::make_shared<const ProNetParams>(load_pronet_file(rc.pronet_file));
    }
    if (!state.tau.has_value() && state.classifier == nullptr) {
      throw Error(ErrorCode::ConfigInvalid,
                  "role '" + name + "' needs a tau or a classifier");
    }
    state.token = rc.token;
    roles[name] = state;
  }
  return Firewall(config, std::move(backend), std::move(roles));
}

Firewall::RoleState Firewall::role_state(const std::string& role) const {
  std::lock_guard lock(role_mutex_);
  auto it = roles_.find(role);
  if (it == roles_.end()) throw Error(ErrorCode::UnknownRole, "role '" + role + "'");
  return it->second;
}

bool Firewall::has_role(const std::string& role) const {
  std::lock_guard lock(role_mutex_);
  return roles_.count(role) > 0;
}

bool Firewall::role_token_ok(const std::string& role, const std::string& token) const {
  std::lock_guard lock(role_mutex_);
  auto it = roles_.find(role);
  if (it == roles_.end()) return false;
  return it->second.token.empty() || it->second.token == token;
}

RiskVerdict Firewall::judge(const AsiScore& score, const RoleState& state, AnchorKind kind) const {
  const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};
  if (kind == AnchorKind::Query && state.classifier != nullptr) {
    RiskVerdict v = classify(score, *state.classifier);
    return v;
  }
  const double tau = kind == AnchorKind::Query
                         ? state.tau.value_or(std::numeric_limits<double>::infinity())
                         : state.tau_doc.value_or(
                               state.tau.value_or(std::numeric_limits<double>::infinity()));
  return match(score, tau, rule);
}

uint64_t Firewall::append_audit(AuditRecord record) {
  std::lock_guard lock(audit_mutex_);
  record.record_id = next_record_id_++;
  if (audit_file_ != nullptr) {
    *audit_file_ << record.to_json_line() << '\n';
    audit_file_->flush();
  }
  audit_log_.push_back(record);
  return record.record_id;
}

std::string Firewall::answer_query(const std::string& query,
                                   std::span<const std::string> doc_texts) const {
  // fit the prompt into the context window by dropping trailing passages
  std::vector<std::string> docs(doc_texts.begin(), doc_texts.end());
  while (true) {
    try {
      return backend_->generate(config_.system_prompt, query, docs, config_.max_answer_tokens);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::OverLength || docs.empty()) throw;
      docs.pop_back();
    }
  }
}

QueryOutcome Firewall::handle_query(const std::string& role, const std::string& query) {
  const RoleState state = role_state(role);
  QueryOutcome outcome;

  std::vector<std::string> doc_texts;
  std::vector<std::string> doc_ids;
  if (store_.size() > 0) {
    for (const ScoredDocument& hit : store_.retrieve(query, config_.retrieval_k, role)) {
      doc_texts.push_back(hit.doc.text);
      doc_ids.push_back(hit.doc.id);
    }
  }

  const AsiScore query_score = score_text(*backend_, query, *state.anchors, AnchorKind::Query);
  outcome.query_verdict = judge(query_score, state, AnchorKind::Query);
  Decision combined = outcome.query_verdict.decision;

  const bool doc_anchors_available = !state.anchors->doc_anchors.empty();
  for (size_t i = 0; i < doc_texts.size(); ++i) {
    if (!doc_anchors_available) break;
    const AsiScore s = score_text(*backend_, doc_texts[i], *state.anchors, AnchorKind::Document);
    RiskVerdict v = judge(s, state, AnchorKind::Document);
    if (v.decision == Decision::Reject) combined = Decision::Reject;
    outcome.doc_verdicts.emplace_back(doc_ids[i], std::move(v));
  }
  outcome.decision = combined;

  const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};
  auto answer_now = [&](bool mitigated) {
    if (mitigated) {
      if (state.pronet == nullptr) {
        throw Error(ErrorCode::MissingProNet, "role '" + role + "' has no trained ProNet");
      }
      ProNetParams scaled = *state.pronet;
      scaled.epsilon = config_.epsilon;
      const ScopedInjection inj = apply(*backend_, scaled);
      outcome.answer = answer_query(query, doc_texts);
    } else {
      outcome.answer = answer_query(query, doc_texts);
    }
  };

  if (combined == Decision::Accept) {
    answer_now(false);
    outcome.action = "answered";
  } else {
    switch (config_.mode) {
      case FirewallMode::DetectOnly:
        answer_now(false);
        outcome.action = "answered";
        break;
      case FirewallMode::Enforce:
        outcome.action = "rejected";
        outcome.rejection_text = config_.refusal_text;
        break;
      case FirewallMode::Mitigate: {
        // data-breach labels stay blocked; poisoning/hijacking (or unlabeled
        // threshold verdicts) are steered
        const std::string label = outcome.query_verdict.risk_label.value_or("");
        const bool steer =
            label.empty() || std::find(config_.mitigate_risks.begin(),
                                       config_.mitigate_risks.end(),
                                       label) != config_.mitigate_risks.end();
        if (steer) {
          answer_now(true);
          outcome.action = "mitigated";
        } else {
          outcome.action = "rejected";
          outcome.rejection_text = config_.refusal_text;
        }
        break;
      }
    }
  }

  outcome.request_id = next_request_id_.fetch_add(1);

  AuditRecord rec;
  rec.request_id = outcome.request_id;
  rec.timestamp_ms = now_ms();
  rec.role = role;
  rec.direction = "inbound-query";
  rec.decision = combined == Decision::Accept ? "accept" : "reject";
  rec.aggregate = aggregate_score(query_score, rule);
  rec.threshold = outcome.query_verdict.threshold;
  rec.risk_label = outcome.query_verdict.risk_label;
  rec.action = outcome.action;
  append_audit(rec);

  // outbound control: score the answer against the role's document anchors,
  // log only, never block
  if (outcome.answer.has_value() && doc_anchors_available && !outcome.answer->empty()) {
    const AsiScore out_score =
        score_text(*backend_, *outcome.answer, *state.anchors, AnchorKind::Document);
    AuditRecord out;
    out.request_id = outcome.request_id;
    out.timestamp_ms = now_ms();
    out.role = role;
    out.direction = "outbound";
    const RiskVerdict v = judge(out_score, state, AnchorKind::Document);
    out.decision = v.decision == Decision::Accept ? "accept" : "reject";
    out.aggregate = aggregate_score(out_score, rule);
    out.threshold = v.threshold;
    out.action = "scored";
    append_audit(out);
  }
  return outcome;
}

std::vector<IngestOutcome> Firewall::handle_ingest(const std::string& collector_id,
                                                   std::span<const Document> docs) {
  const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};
  std::vector<IngestOutcome> outcomes;
  outcomes.reserve(docs.size());
  const uint64_t request_id = next_request_id_.fetch_add(1);

  for (const Document& doc : docs) {
    if (doc.id.empty() || doc.text.empty()) {
      throw Error(ErrorCode::MalformedDoc, "document needs an id and text");
    }
    if (!has_role(doc.role_owner)) {
      throw Error(ErrorCode::MalformedDoc, "document '" + doc.id + "' names unknown role '" +
                                               doc.role_owner + "'");
    }
    const RoleState state = role_state(doc.role_owner);
    if (state.anchors->doc_anchors.empty()) {
      throw Error(ErrorCode::ConfigInvalid,
                  "role '" + doc.role_owner + "' has no document anchors for ingest screening");
    }
    const AsiScore score = score_text(*backend_, doc.text, *state.anchors, AnchorKind::Document);
    RiskVerdict verdict = judge(score, state, AnchorKind::Document);

    IngestOutcome out;
    out.id = doc.id;
    out.accepted = verdict.decision == Decision::Accept;
    out.verdict = verdict;
    if (out.accepted) {
      store_.ingest(std::span<const Document>(&doc, 1));
    } else {
      std::lock_guard lock(quarantine_mutex_);
      quarantine_.emplace_back(doc, verdict);
    }

    AuditRecord rec;
    rec.request_id = request_id;
    rec.timestamp_ms = now_ms();
    rec.role = doc.role_owner;
    rec.direction = "inbound-doc";
    rec.decision = out.accepted ? "accept" : "reject";
    rec.aggregate = aggregate_score(score, rule);
    rec.threshold = verdict.threshold;
    rec.action = out.accepted ? "ingested" : "quarantined";
    rec.detail = collector_id + ":" + doc.id;
    append_audit(rec);

    outcomes.push_back(std::move(out));
  }
  return outcomes;
}

void Firewall::reload_anchors(const std::string& role, const std::string& anchor_file) {
  AnchorSet fresh = load_anchors_file(anchor_file);
  if (fresh.backend_fingerprint != backend_->fingerprint()) {
    throw Error(ErrorCode::FingerprintMismatch,
                "anchor file was built by backend " + fresh.backend_fingerprint);
  }
  std::lock_guard lock(role_mutex_);
  auto it = roles_.find(role);
  if (it == roles_.end()) throw Error(ErrorCode::UnknownRole, "role '" + role + "'");
  it->second.anchors = std::make_shared<const AnchorSet>(std::move(fresh));
}

std::vector<AuditRecord> Firewall::audit_since(uint64_t record_id) const {
  std::lock_guard lock(audit_mutex_);
  std::vector<AuditRecord> out;
  for (const AuditRecord& r : audit_log_) {
    if (r.record_id > record_id) out.push_back(r);
  }
  return out;
}

void Firewall::flush_audit() {
  std::lock_guard lock(audit_mutex_);
  if (audit_file_ != nullptr) audit_file_->flush();
}

std::vector<Document> Firewall::quarantined() const {
  std::lock_guard lock(quarantine_mutex_);
  std::vector<Document> out;
  out.reserve(quarantine_.size());
  for (const auto& [doc, verdict] : quarantine_) out.push_back(doc);
  return out;
}

// ---- HTTP surface -----------------------------------------------------------

struct GatewayServer::Impl {
  httplib::Server server;
};

namespace {

json error_body(const std::string& code, const std::string& message) {
  return json{{"code", code}, {"message", message}};
}

// Generated answers are raw bytes from a byte-level model; invalid UTF-8 is
// replaced rather than thrown on.
std::string dump_safe(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

json verdict_json(const RiskVerdict& v) {
  const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};
  json j;
  j["decision"] = v.decision == Decision::Accept ? "accept" : "reject";
  j["aggregate"] = aggregate_score(v.scores, rule);
  j["normalized"] = v.scores.normalized;
  j["layers"] = v.scores.layers;
  if (v.threshold.has_value()) j["threshold"] = *v.threshold;
  if (v.risk_label.has_value()) j["risk_label"] = *v.risk_label;
  return j;
}

std::string bearer_token(const httplib::Request& req) {
  const std::string auth = req.get_header_value("Authorization");
  if (auth.rfind("Bearer ", 0) == 0) return auth.substr(7);
  return "";
}

}  // namespace

GatewayServer::GatewayServer(Firewall& firewall)
    : firewall_(firewall), impl_(std::make_unique<Impl>()) {
  auto& server = impl_->server;

  server.Post("/v1/query", [this](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      res.status = 400;
      res.set_content(dump_safe(error_body("malformed_body", "request body is not valid JSON")),
                      "application/json");
      return;
    }
    if (!body.contains("role") || !body.contains("query")) {
      res.status = 400;
      res.set_content(dump_safe(error_body("missing_field", "need 'role' and 'query'")),
                      "application/json");
      return;
    }
    const std::string role = body["role"].get<std::string>();
    const std::string query = body["query"].get<std::string>();
    if (!firewall_.has_role(role)) {
      res.status = 400;
      res.set_content(dump_safe(error_body("unknown_role", "role '" + role + "' is not configured")),
                      "application/json");
      return;
    }
    if (!firewall_.role_token_ok(role, bearer_token(req))) {
      res.status = 401;
      res.set_content(dump_safe(error_body("unauthorized", "bad or missing bearer token")),
                      "application/json");
      return;
    }
    try {
      const QueryOutcome out = firewall_.handle_query(role, query);
      json j;
      j["request_id"] = out.request_id;
      j["decision"] = out.decision == Decision::Accept ? "accept" : "reject";
      j["action"] = out.action;
      if (out.answer.has_value()) j["answer"] = *out.answer;
      if (!out.rejection_text.empty()) j["rejection"] = out.rejection_text;
      j["verdict"] = verdict_json(out.query_verdict);
      json dv = json::array();
      for (const auto& [id, v] : out.doc_verdicts) {
        json e = verdict_json(v);
        e["doc_id"] = id;
        dv.push_back(e);
      }
      j["doc_verdicts"] = dv;
      res.set_content(dump_safe(j), "application/json");
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(dump_safe(error_body(error_code_name(e.code()), e.what())), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(dump_safe(error_body("internal_error", e.what())), "application/json");
    }
  });

  server.Post("/v1/ingest", [this](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      res.status = 400;
      res.set_content(dump_safe(error_body("malformed_body", "request body is not valid JSON")),
                      "application/json");
      return;
    }
    if (!body.contains("collector") || !body.contains("docs") || !body["docs"].is_array()) {
      res.status = 400;
      res.set_content(dump_safe(error_body("missing_field", "need 'collector' and 'docs'")),
                      "application/json");
      return;
    }
    std::vector<Document> docs;
    for (const json& d : body["docs"]) {
      Document doc;
      doc.id = d.value("id", std::string());
      doc.role_owner = d.value("role", std::string());
      doc.text = d.value("text", std::string());
      if (d.contains("poisoned")) doc.poisoned = d["poisoned"].get<bool>();
      docs.push_back(std::move(doc));
    }
    try {
      const auto outcomes = firewall_.handle_ingest(body["collector"].get<std::string>(), docs);
      json results = json::array();
      for (const IngestOutcome& o : outcomes) {
        json e = verdict_json(o.verdict);
        e["id"] = o.id;
        e["accepted"] = o.accepted;
        results.push_back(e);
      }
      res.set_content(dump_safe(json{{"results", results}}), "application/json");
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(dump_safe(error_body(error_code_name(e.code()), e.what())), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(dump_safe(error_body("internal_error", e.what())), "application/json");
    }
  });

  server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    json j;
    j["status"] = "ok";
    j["fingerprint"] = firewall_.backend().fingerprint();
    j["mode"] = mode_name(firewall_.config().mode);
    res.set_content(dump_safe(j), "application/json");
  });

  server.Get("/v1/audit", [this](const httplib::Request& req, httplib::Response& res) {
    uint64_t since = 0;
    if (req.has_param("since")) {
      try {
        since = std::stoull(req.get_param_value("since"));
      } catch (...) {
        res.status = 400;
        res.set_content(dump_safe(error_body("bad_param", "'since' must be an integer")),
                        "application/json");
        return;
      }
    }
    json records = json::array();
    for (const AuditRecord& r : firewall_.audit_since(since)) {
      records.push_back(json::parse(r.to_json_line()));
    }
    res.set_content(dump_safe(json{{"records", records}}), "application/json");
  });
}

GatewayServer::~GatewayServer() { stop(); }

void GatewayServer::start(const std::string& host, int port) {
  auto& server = impl_->server;
  port_ = port;
  if (port == 0) {
    port_ = server.bind_to_any_port(host);
    if (port_ < 0) throw Error(ErrorCode::BindFailure, "cannot bind to " + host);
  } else if (!server.bind_to_port(host, port)) {
    throw Error(ErrorCode::BindFailure, "cannot bind to " + host + ":" + std::to_string(port));
  }
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  server.wait_until_ready();
}

void GatewayServer::stop() {
  if (thread_.joinable()) {
    impl_->server.stop();
    thread_.join();
    firewall_.flush_audit();
  }
}

}  // namespace ragfire
