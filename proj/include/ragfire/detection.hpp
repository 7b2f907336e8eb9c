#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ragfire/backend.hpp"

namespace ragfire {

inline constexpr const char* kBenignLabel = "benign";

struct AnchorEntry {
  std::string source_text;
  // pooled activation per layer, in layer_set order
  std::vector<std::vector<double>> activations;
};

// Per-client authorized activation zone. Immutable once built; every vector
// was produced by the backend identified by `backend_fingerprint` with the
// recorded pooling strategy.
struct AnchorSet {
  std::string client;
  std::vector<int> layer_set;
  std::vector<AnchorEntry> query_anchors;
  std::vector<AnchorEntry> doc_anchors;
  uint64_t seed = 0;
  Pooling pooling = Pooling::Mean;
  std::string backend_fingerprint;
  size_t width = 0;

  size_t layer_index(int layer) const;
};

enum class AnchorKind { Query, Document };

// Samples n of granted_texts (uniform, without replacement, Fisher-Yates
// prefix driven by Rng(seed)) and embeds each at every layer in layer_set.
// Document anchors are drawn the same way from granted_docs with seed + 1,
// capped at min(n, |granted_docs|).
AnchorSet extract_anchors(const ActivationBackend& backend, const std::string& client,
                          std::span<const std::string> granted_texts,
                          std::span<const std::string> granted_docs, size_t n,
                          std::span<const int> layer_set, uint64_t seed,
                          Pooling pooling = Pooling::Mean);

struct AsiScore {
  std::vector<int> layers;
  std::vector<double> raw;         // sum of squared distances, per layer
  std::vector<double> normalized;  // raw / anchor count, per layer

  double normalized_at(int layer) const;
  const std::vector<double>& feature_vector() const { return normalized; }
};

// raw = sum_j ||target - anchor_j||^2, normalized = raw / count.
std::pair<double, double> asi(std::span<const double> target,
                              std::span<const std::vector<double>> anchor_vectors);
std::pair<double, double> asi(std::span<const double> target, const AnchorSet& anchors, int layer,
                              AnchorKind kind = AnchorKind::Query);

AsiScore score_text(const ActivationBackend& backend, std::string_view text,
                    const AnchorSet& anchors, AnchorKind kind);

// Pooled activations of one text at every anchor layer (shared by scoring and
// the activation-difference export).
std::vector<std::vector<double>> embed_text(const ActivationBackend& backend,
                                            std::string_view text,
                                            std::span<const int> layer_set, Pooling pooling);

struct AggregateRule {
  enum class Mode { SingleLayer, MeanOverLayers };
  Mode mode = Mode::MeanOverLayers;
  int layer = 0;  // used by SingleLayer
};

double aggregate_score(const AsiScore& score, const AggregateRule& rule);

enum class Decision { Accept, Reject };

struct RiskVerdict {
  Decision decision = Decision::Accept;
  AsiScore scores;
  std::optional<double> threshold;
  std::optional<std::string> classifier_label;
  std::optional<std::string> risk_label;
  int64_t timestamp_ms = 0;
};

// Accept iff the aggregated normalized score <= tau (boundary inclusive).
RiskVerdict match(const AsiScore& score, double tau, const AggregateRule& rule);

// tau = nearest-rank p-th percentile of the leave-one-out aggregated ASI of
// each anchor against the remaining anchors. Default p = 99.
double calibrate_threshold(const AnchorSet& anchors, double percentile, const AggregateRule& rule,
                           AnchorKind kind = AnchorKind::Query);

// Nearest-rank percentile: rank = ceil(p/100 * n) clamped to [1, n] over the
// ascending-sorted values.
double nearest_rank_percentile(std::vector<double> values, double percentile);

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double split = 0.0;
  int left = -1;
  int right = -1;
  std::string label;

  bool is_leaf() const { return feature < 0; }
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // node 0 is the root
  size_t feature_count = 0;
  std::vector<std::string> training_predictions;

  const std::string& predict(std::span<const double> features) const;
  void save(std::ostream& out) const;
  void save_file(const std::string& path) const;
  static DecisionTree load(std::istream& in);
  static DecisionTree load_file(const std::string& path);
};

// Axis-aligned binary tree, depth capped at max_depth. Candidate splits are
// the midpoints between consecutive sorted distinct values of each feature;
// the split with the highest information gain wins, ties resolved toward the
// lowest feature index then the lowest split value. `x <= split` goes left.
DecisionTree fit_classifier(std::span<const std::vector<double>> features,
                            std::span<const std::string> labels, int max_depth = 3);

RiskVerdict classify(const AsiScore& score, const DecisionTree& tree);

int64_t now_ms();

}  // namespace ragfire
