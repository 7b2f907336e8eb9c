#pragma once

#include <atomic>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ragfire/detection.hpp"
#include "ragfire/harness.hpp"
#include "ragfire/pronet.hpp"
#include "ragfire/retrieval.hpp"
#include "ragfire/toylm.hpp"

namespace ragfire {

enum class FirewallMode { DetectOnly, Enforce, Mitigate };

FirewallMode mode_from_name(std::string_view name);
const char* mode_name(FirewallMode mode);

struct RoleConfig {
  std::string anchors_file;
  std::optional<double> tau;       // query threshold
  std::optional<double> tau_doc;   // document threshold (ingest screening)
  std::string classifier_file;
  std::string pronet_file;
  std::string token;  // static bearer token, empty = no auth required
};

struct FirewallConfig {
  ToyLmConfig backend;
  std::string weights_file;  // loaded when present, else built and saved here
  bool pretrain_backend = true;
  PretrainOptions pretrain;
  std::vector<int> layer_set = {0, 1, 3};
  Pooling pooling = Pooling::Mean;
  FirewallMode mode = FirewallMode::Enforce;
  size_t retrieval_k = 4;
  double percentile = 99.0;
  double epsilon = 1.0;
  double alpha = 1.0;
  std::string audit_path;
  std::string refusal_text = "Request rejected by firewall policy.";
  std::string system_prompt = "You are a helpful assistant for the organization.";
  int max_answer_tokens = 24;
  std::string corpus_file;
  std::string host = "127.0.0.1";
  int port = 8642;
  std::vector<std::string> mitigate_risks = {"poisoning", "hijacking"};
  std::map<std::string, RoleConfig> roles;

  static FirewallConfig from_json_file(const std::string& path);
};

struct AuditRecord {
  uint64_t record_id = 0;
  uint64_t request_id = 0;
  int64_t timestamp_ms = 0;
  std::string role;
  std::string direction;  // inbound-query | inbound-doc | outbound
  std::string decision;   // accept | reject
  double aggregate = 0.0;
  std::optional<double> threshold;
  std::optional<std::string> risk_label;
  std::string action;  // answered | rejected | mitigated | ingested | quarantined | scored
  std::string detail;  // doc id etc.

  std::string to_json_line() const;
};

struct QueryOutcome {
  uint64_t request_id = 0;
  Decision decision = Decision::Accept;  // combined verdict
  std::string action;                    // answered | rejected | mitigated
  std::optional<std::string> answer;
  RiskVerdict query_verdict;
  std::vector<std::pair<std::string, RiskVerdict>> doc_verdicts;
  std::string rejection_text;
};

struct IngestOutcome {
  std::string id;
  bool accepted = false;
  RiskVerdict verdict;
};

// The firewall engine: role-authenticated query flow, ingest screening,
// mitigation, audit. HTTP transport lives in GatewayServer.
class Firewall {
 public:
  struct RoleState {
    std::shared_ptr<const AnchorSet> anchors;
    std::optional<double> tau;
    std::optional<double> tau_doc;
    std::shared_ptr<const DecisionTree> classifier;
    std::shared_ptr<const ProNetParams> pronet;
    std::string token;
  };

  Firewall(FirewallConfig config, std::shared_ptr<ActivationBackend> backend,
           std::map<std::string, RoleState> roles);

  // Loads anchors/classifiers/pronets/corpus from the files named in config;
  // builds (or loads) the backend.
  static Firewall from_config(const FirewallConfig& config);

  QueryOutcome handle_query(const std::string& role, const std::string& query);
  std::vector<IngestOutcome> handle_ingest(const std::string& collector_id,
                                           std::span<const Document> docs);
  void reload_anchors(const std::string& role, const std::string& anchor_file);

  std::vector<AuditRecord> audit_since(uint64_t record_id) const;
  void flush_audit();

  const FirewallConfig& config() const { return config_; }
  ActivationBackend& backend() { return *backend_; }
  VectorStore& store() { return store_; }
  std::vector<Document> quarantined() const;
  bool role_token_ok(const std::string& role, const std::string& token) const;
  bool has_role(const std::string& role) const;

 private:
  RoleState role_state(const std::string& role) const;
  RiskVerdict judge(const AsiScore& score, const RoleState& state, AnchorKind kind) const;
  uint64_t append_audit(AuditRecord record);  // assigns record_id, writes the line
  std::string answer_query(const std::string& query, std::span<const std::string> doc_texts) const;

  FirewallConfig config_;
  std::shared_ptr<ActivationBackend> backend_;
  VectorStore store_;

  mutable std::mutex role_mutex_;
  std::map<std::string, RoleState> roles_;

  mutable std::mutex quarantine_mutex_;
  std::vector<std::pair<Document, RiskVerdict>> quarantine_;

  std::atomic<uint64_t> next_request_id_{1};
  mutable std::mutex audit_mutex_;
  std::vector<AuditRecord> audit_log_;
  std::unique_ptr<std::ofstream> audit_file_;
  uint64_t next_record_id_ = 1;
};

// JSON-over-HTTP control surface on cpp-httplib. Runs the listener on a
// background thread; stop() joins it and flushes the audit log.
class GatewayServer {
 public:
  explicit GatewayServer(Firewall& firewall);
  ~GatewayServer();

  void start(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

 private:
  struct Impl;
  Firewall& firewall_;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace ragfire
