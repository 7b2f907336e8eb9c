#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ragfire/detection.hpp"
#include "ragfire/harness.hpp"
#include "ragfire/metrics.hpp"
#include "ragfire/pronet.hpp"
#include "ragfire/toylm.hpp"

namespace ragfire {

// Desk-scale experiment plan. Every randomized step draws from one of the
// named seeds, so reports are byte-identical across reruns.
struct ExperimentSpec {
  std::vector<Risk> risks{kAllRisks, kAllRisks + 5};
  size_t queries_per_role = 500;
  size_t docs_per_role = 420;

  uint64_t corpus_seed = 1234;
  uint64_t attack_seed = 7;
  uint64_t anchor_seed = 42;
  uint64_t shuffle_seed = 99;
  uint64_t pronet_seed = 77;

  std::vector<size_t> anchor_counts = {25, 50, 100, 200};
  std::vector<std::vector<int>> layer_sets = {{0, 1, 3}};
  size_t eval_benign = 200;
  size_t eval_attack = 200;
  double percentile = 99.0;
  size_t null_shuffles = 20;

  std::string client_role = "medical";
  std::string unauthorized_target = "finance";
  std::string hijack_topic = "an unrelated sponsor site";

  Pooling pooling = Pooling::Mean;

  // mitigation / harmlessness
  int pronet_rank = 8;
  int pronet_layer = 0;
  std::vector<int> pronet_layer_set = {0};
  double epsilon = 1.0;
  double alpha = 1.0;
  size_t train_steps = 150;
  double train_lr = 2e-2;
  size_t train_batch = 12;
  size_t harmless_queries = 24;
  size_t adaptive_n = 5;

  std::string out_dir = ".";

  ToyLmConfig backend;
  bool pretrain_backend = true;
  PretrainOptions pretrain;
  std::string weights_file;

  uint64_t config_hash() const;
  static ExperimentSpec from_json_file(const std::string& path);
};

// Loads spec.weights_file when it exists; otherwise builds the backend
// (pretraining on the bundled corpus when enabled) and saves it there.
std::shared_ptr<ToyLm> build_backend(const ExperimentSpec& spec);

// One labeled evaluation suite per risk: negatives from the client role's
// held-out texts, positives from the harness generators.
struct RiskSuite {
  Risk risk = Risk::Reconnaissance;
  AnchorKind kind = AnchorKind::Query;
  std::vector<std::string> benign;
  std::vector<std::string> attacks;
};

struct BenchContext {
  SyntheticCorpus corpus;
  std::vector<std::string> anchor_query_pool;
  std::vector<std::string> anchor_doc_pool;
  std::vector<RiskSuite> suites;
};

BenchContext build_bench_context(const ExperimentSpec& spec);

struct DetectionCell {
  std::string risk;
  size_t anchor_count = 0;
  std::string layers;
  double auroc = 0.0;
  double macc = 0.0;
  double tau = 0.0;
  double null_auroc_mean = 0.0;
  double null_min = 0.5;
  double null_max = 0.5;
};

struct DetectionReport {
  std::vector<DetectionCell> cells;
  std::string csv;
};

DetectionReport run_detection_bench(const ExperimentSpec& spec, ActivationBackend& backend);

struct HarmlessnessReport {
  double precision_self = 0.0, recall_self = 0.0, f1_self = 0.0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double delta_precision = 0.0, delta_recall = 0.0, delta_f1 = 0.0;
  std::string csv;
};

// Compares ProNet-attached generations against baseline generations on benign
// queries. `params` is typically a trained ProNet; a zero-initialized one (or
// epsilon = 0) must yield deltas of exactly zero.
HarmlessnessReport run_harmlessness(const ExperimentSpec& spec, ActivationBackend& backend,
                                    const ProNetParams& params);

struct AdaptiveCell {
  std::string risk;
  double auroc_original = 0.0;
  double auroc_perturbed = 0.0;
  double delta = 0.0;
};

struct AdaptiveReport {
  std::vector<AdaptiveCell> cells;
  std::string csv;
};

AdaptiveReport run_adaptive(const ExperimentSpec& spec, ActivationBackend& backend);

// One row per evaluated sample: per-layer normalized ASI plus the pooled
// activation minus its nearest anchor at the first configured layer, for
// external plotting.
std::string export_activation_diffs(const ExperimentSpec& spec, ActivationBackend& backend);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace ragfire
