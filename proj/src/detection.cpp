#include "ragfire/detection.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "ragfire/anchors_io.hpp"

namespace ragfire {

int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

size_t AnchorSet::layer_index(int layer) const {
  for (size_t i = 0; i < layer_set.size(); ++i) {
    if (layer_set[i] == layer) return i;
  }
  throw Error(ErrorCode::BadLayer, "layer " + std::to_string(layer) + " not in anchor layer set");
}

std::vector<std::vector<double>> embed_text(const ActivationBackend& backend,
                                            std::string_view text,
                                            std::span<const int> layer_set, Pooling pooling) {
  const TokenSequence tokens = backend.tokenize(text);
  const ForwardResult fwd = backend.forward(tokens, layer_set);
  std::vector<std::vector<double>> out;
  out.reserve(layer_set.size());
  for (int layer : layer_set) {
    out.push_back(pool(fwd.activations, layer, pooling));
  }
  return out;
}

namespace {

std::vector<AnchorEntry> embed_sample(const ActivationBackend& backend,
                                      std::span<const std::string> texts, size_t n,
                                      std::span<const int> layer_set, Pooling pooling,
                                      uint64_t seed) {
  const std::vector<size_t> picks = sample_without_replacement(texts.size(), n, seed);
  std::vector<AnchorEntry> entries;
  entries.reserve(n);
  for (size_t idx : picks) {
    AnchorEntry e;
    e.source_text = texts[idx];
    e.activations = embed_text(backend, e.source_text, layer_set, pooling);
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace

AnchorSet extract_anchors(const ActivationBackend& backend, const std::string& client,
                          std::span<const std::string> granted_texts,
                          std::span<const std::string> granted_docs, size_t n,
                          std::span<const int> layer_set, uint64_t seed, Pooling pooling) {
  if (granted_texts.empty()) {
    throw Error(ErrorCode::NotEnoughSamples, "no granted texts for client " + client);
  }
  if (n == 0 || n > granted_texts.size()) {
    throw Error(ErrorCode::NotEnoughSamples,
                "anchor count " + std::to_string(n) + " not in [1, " +
                    std::to_string(granted_texts.size()) + "]");
  }
  AnchorSet set;
  set.client = client;
  set.layer_set.assign(layer_set.begin(), layer_set.end());
  set.seed = seed;
  set.pooling = pooling;
  set.backend_fingerprint = backend.fingerprint();
  set.width = static_cast<size_t>(backend.width());
  set.query_anchors = embed_sample(backend, granted_texts, n, layer_set, pooling, seed);
  if (!granted_docs.empty()) {
    const size_t n_docs = std::min(n, granted_docs.size());
    set.doc_anchors = embed_sample(backend, granted_docs, n_docs, layer_set, pooling, seed + 1);
  }
  return set;
}

namespace {

// Summing the per-anchor terms in ascending order makes the result exactly
// invariant under anchor reordering (same multiset, same fp sum).
double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double t : terms) total += t;
  return total;
}

}  // namespace

std::pair<double, double> asi(std::span<const double> target,
                              std::span<const std::vector<double>> anchor_vectors) {
  if (anchor_vectors.empty()) throw Error(ErrorCode::NoAnchors, "empty anchor list");
  std::vector<double> terms;
  terms.reserve(anchor_vectors.size());
  for (const std::vector<double>& a : anchor_vectors) {
    if (a.size() != target.size()) {
      throw Error(ErrorCode::WidthMismatch, "target width " + std::to_string(target.size()) +
                                                " vs anchor width " + std::to_string(a.size()));
    }
    terms.push_back(squared_distance(target, a));
  }
  const double raw = sorted_sum(terms);
  return {raw, raw / static_cast<double>(anchor_vectors.size())};
}

std::pair<double, double> asi(std::span<const double> target, const AnchorSet& anchors, int layer,
                              AnchorKind kind) {
  const size_t li = anchors.layer_index(layer);
  const auto& entries = kind == AnchorKind::Query ? anchors.query_anchors : anchors.doc_anchors;
  if (entries.empty()) throw Error(ErrorCode::NoAnchors, "no anchors of requested kind");
  std::vector<std::vector<double>> vecs;
  vecs.reserve(entries.size());
  for (const AnchorEntry& e : entries) vecs.push_back(e.activations[li]);
  return asi(target, vecs);
}

AsiScore score_text(const ActivationBackend& backend, std::string_view text,
                    const AnchorSet& anchors, AnchorKind kind) {
  const auto& entries = kind == AnchorKind::Query ? anchors.query_anchors : anchors.doc_anchors;
  if (entries.empty()) {
    throw Error(ErrorCode::NoAnchors, "client " + anchors.client + " has no anchors of this kind");
  }
  const std::vector<std::vector<double>> pooled =
      embed_text(backend, text, anchors.layer_set, anchors.pooling);
  AsiScore score;
  score.layers = anchors.layer_set;
  std::vector<double> terms;
  for (size_t li = 0; li < anchors.layer_set.size(); ++li) {
    terms.clear();
    for (const AnchorEntry& e : entries) {
      terms.push_back(squared_distance(pooled[li], e.activations[li]));
    }
    const double raw = sorted_sum(terms);
    score.raw.push_back(raw);
    score.normalized.push_back(raw / static_cast<double>(entries.size()));
  }
  return score;
}

double AsiScore::normalized_at(int layer) const {
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] == layer) return normalized[i];
  }
  throw Error(ErrorCode::BadLayer, "layer " + std::to_string(layer) + " not scored");
}

double aggregate_score(const AsiScore& score, const AggregateRule& rule) {
  if (rule.mode == AggregateRule::Mode::SingleLayer) return score.normalized_at(rule.layer);
  double sum = 0.0;
  for (double v : score.normalized) sum += v;
  return sum / static_cast<double>(score.normalized.size());
}

RiskVerdict match(const AsiScore& score, double tau, const AggregateRule& rule) {
  RiskVerdict verdict;
  verdict.scores = score;
  verdict.threshold = tau;
  verdict.decision = aggregate_score(score, rule) <= tau ? Decision::Accept : Decision::Reject;
  verdict.timestamp_ms = now_ms();
  return verdict;
}

double calibrate_threshold(const AnchorSet& anchors, double percentile, const AggregateRule& rule,
                           AnchorKind kind) {
  const auto& entries = kind == AnchorKind::Query ? anchors.query_anchors : anchors.doc_anchors;
  const size_t n = entries.size();
  if (n < 2) throw Error(ErrorCode::NotEnoughSamples, "leave-one-out needs >= 2 anchors");

  std::vector<double> loo_scores;
  loo_scores.reserve(n);
  std::vector<double> terms;
  for (size_t i = 0; i < n; ++i) {
    AsiScore s;
    s.layers = anchors.layer_set;
    for (size_t li = 0; li < anchors.layer_set.size(); ++li) {
      terms.clear();
      for (size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        terms.push_back(squared_distance(entries[i].activations[li], entries[j].activations[li]));
      }
      const double raw = sorted_sum(terms);
      s.raw.push_back(raw);
      s.normalized.push_back(raw / static_cast<double>(n - 1));
    }
    loo_scores.push_back(aggregate_score(s, rule));
  }
  return nearest_rank_percentile(std::move(loo_scores), percentile);
}

double nearest_rank_percentile(std::vector<double> values, double percentile) {
  if (values.empty()) throw Error(ErrorCode::NotEnoughSamples, "percentile of empty list");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  size_t rank = static_cast<size_t>(std::ceil(percentile / 100.0 * static_cast<double>(n)));
  rank = std::min(std::max<size_t>(rank, 1), n);
  return values[rank - 1];
}

namespace {

// Split quality is compared through n*H written as integer x*log2(x) terms,
// summed in ascending label order: identical candidate subsets then produce
// bit-identical costs, so fp noise can never flip the documented tie-break.
double xlog2x(size_t c) {
  return c == 0 ? 0.0 : static_cast<double>(c) * std::log2(static_cast<double>(c));
}

double scaled_entropy(const std::map<std::string, size_t>& counts, size_t total) {
  double sum = 0.0;
  for (const auto& [label, c] : counts) sum += xlog2x(c);
  return xlog2x(total) - sum;
}

struct TreeBuilder {
  std::span<const std::vector<double>> features;
  std::span<const std::string> labels;
  int max_depth;
  std::vector<TreeNode> nodes;

  std::string majority(const std::vector<size_t>& idx) const {
    std::map<std::string, size_t> counts;
    for (size_t i : idx) counts[labels[i]]++;
    std::string best;
    size_t best_count = 0;
    for (const auto& [label, c] : counts) {
      if (c > best_count) {  // map order makes ties go to the smallest label
        best = label;
        best_count = c;
      }
    }
    return best;
  }

  int build(const std::vector<size_t>& idx, int depth) {
    std::map<std::string, size_t> counts;
    for (size_t i : idx) counts[labels[i]]++;
    const bool pure = counts.size() == 1;
    if (pure || depth >= max_depth || idx.size() < 2) {
      nodes.push_back(TreeNode{-1, 0.0, -1, -1, majority(idx)});
      return static_cast<int>(nodes.size() - 1);
    }

    // maximizing information gain == minimizing the summed scaled child
    // entropy; candidates only count when they beat the parent (gain > 0)
    const double parent_cost = scaled_entropy(counts, idx.size());
    const size_t feature_count = features[idx[0]].size();
    int best_feature = -1;
    double best_split = 0.0;
    double best_cost = parent_cost;
    for (size_t f = 0; f < feature_count; ++f) {
      std::vector<double> values;
      values.reserve(idx.size());
      for (size_t i : idx) values.push_back(features[i][f]);
      std::sort(values.begin(), values.end());
      values.erase(std::unique(values.begin(), values.end()), values.end());
      for (size_t v = 0; v + 1 < values.size(); ++v) {
        const double split = (values[v] + values[v + 1]) / 2.0;
        std::map<std::string, size_t> left_counts, right_counts;
        size_t n_left = 0, n_right = 0;
        for (size_t i : idx) {
          if (features[i][f] <= split) {
            left_counts[labels[i]]++;
            ++n_left;
          } else {
            right_counts[labels[i]]++;
            ++n_right;
          }
        }
        const double cost =
            scaled_entropy(left_counts, n_left) + scaled_entropy(right_counts, n_right);
        // Strict improvement in (feature asc, split asc) scan order implements
        // the lowest-feature-then-lowest-split tie rule.
        if (cost < best_cost) {
          best_cost = cost;
          best_feature = static_cast<int>(f);
          best_split = split;
        }
      }
    }

    if (best_feature < 0) {
      nodes.push_back(TreeNode{-1, 0.0, -1, -1, majority(idx)});
      return static_cast<int>(nodes.size() - 1);
    }

    std::vector<size_t> left_idx, right_idx;
    for (size_t i : idx) {
      if (features[i][static_cast<size_t>(best_feature)] <= best_split) {
        left_idx.push_back(i);
      } else {
        right_idx.push_back(i);
      }
    }
    const int node_id = static_cast<int>(nodes.size());
    nodes.push_back(TreeNode{best_feature, best_split, -1, -1, ""});
    nodes[static_cast<size_t>(node_id)].left = build(left_idx, depth + 1);
    nodes[static_cast<size_t>(node_id)].right = build(right_idx, depth + 1);
    return node_id;
  }
};

}  // namespace

DecisionTree fit_classifier(std::span<const std::vector<double>> features,
                            std::span<const std::string> labels, int max_depth) {
  if (features.size() != labels.size() || features.empty()) {
    throw Error(ErrorCode::LayoutMismatch, "features and labels must align and be nonempty");
  }
  const size_t width = features[0].size();
  for (const std::vector<double>& f : features) {
    if (f.size() != width) throw Error(ErrorCode::LayoutMismatch, "ragged feature rows");
  }
  bool multi_class = false;
  for (size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] != labels[0]) {
      multi_class = true;
      break;
    }
  }
  if (!multi_class) throw Error(ErrorCode::SingleClass, "need at least two classes");

  TreeBuilder builder{features, labels, max_depth, {}};
  std::vector<size_t> all(features.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  builder.build(all, 0);

  DecisionTree tree;
  tree.nodes = std::move(builder.nodes);
  tree.feature_count = width;
  tree.training_predictions.reserve(features.size());
  for (const std::vector<double>& f : features) {
    tree.training_predictions.push_back(tree.predict(f));
  }
  return tree;
}

const std::string& DecisionTree::predict(std::span<const double> features) const {
  if (features.size() != feature_count) {
    throw Error(ErrorCode::LayoutMismatch, "feature vector width " +
                                               std::to_string(features.size()) + " vs " +
                                               std::to_string(feature_count));
  }
  size_t at = 0;
  while (!nodes[at].is_leaf()) {
    const TreeNode& n = nodes[at];
    at = static_cast<size_t>(features[static_cast<size_t>(n.feature)] <= n.split ? n.left
                                                                                 : n.right);
  }
  return nodes[at].label;
}

RiskVerdict classify(const AsiScore& score, const DecisionTree& tree) {
  RiskVerdict verdict;
  verdict.scores = score;
  const std::string& label = tree.predict(score.feature_vector());
  verdict.classifier_label = label;
  if (label == kBenignLabel) {
    verdict.decision = Decision::Accept;
  } else {
    verdict.decision = Decision::Reject;
    if (label != "malicious") verdict.risk_label = label;
  }
  verdict.timestamp_ms = now_ms();
  return verdict;
}

void DecisionTree::save(std::ostream& out) const {
  out << "tree v1 features " << feature_count << " nodes " << nodes.size() << "\n";
  out.precision(17);
  for (size_t i = 0; i < nodes.size(); ++i) {
    const TreeNode& n = nodes[i];
    if (n.is_leaf()) {
      out << "node " << i << " leaf " << n.label << "\n";
    } else {
      out << "node " << i << " split " << n.feature << " " << n.split << " " << n.left << " "
          << n.right << "\n";
    }
  }
}

void DecisionTree::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  save(out);
}

DecisionTree DecisionTree::load(std::istream& in) {
  DecisionTree tree;
  std::string word;
  size_t node_count = 0;
  in >> word;
  if (word != "tree") throw Error(ErrorCode::ConfigInvalid, "not a decision-tree file");
  in >> word;  // version
  if (word != "v1") throw Error(ErrorCode::ConfigInvalid, "unsupported tree version");
  in >> word >> tree.feature_count >> word >> node_count;
  tree.nodes.resize(node_count);
  for (size_t i = 0; i < node_count; ++i) {
    size_t id = 0;
    std::string kind;
    in >> word >> id >> kind;
    if (!in || word != "node" || id >= node_count) {
      throw Error(ErrorCode::ConfigInvalid, "malformed tree node line");
    }
    TreeNode n;
    if (kind == "leaf") {
      in >> n.label;
    } else if (kind == "split") {
      in >> n.feature >> n.split >> n.left >> n.right;
    } else {
      throw Error(ErrorCode::ConfigInvalid, "unknown tree node kind '" + kind + "'");
    }
    tree.nodes[id] = n;
  }
  if (!in) throw Error(ErrorCode::ConfigInvalid, "truncated tree file");
  return tree;
}

DecisionTree DecisionTree::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return load(in);
}

// ---- anchor file I/O -------------------------------------------------------

namespace {

void write_u32(std::ostream& out, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

void write_u64(std::ostream& out, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

void write_str(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string read_str(std::istream& in) {
  const uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

void write_vectors(std::ostream& out, const std::vector<AnchorEntry>& entries) {
  for (const AnchorEntry& e : entries) {
    for (const std::vector<double>& vec : e.activations) {
      for (double v : vec) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        write_u64(out, bits);
      }
    }
  }
}

void read_vectors(std::istream& in, std::vector<AnchorEntry>& entries, size_t layers,
                  size_t width) {
  for (AnchorEntry& e : entries) {
    e.activations.assign(layers, std::vector<double>(width));
    for (std::vector<double>& vec : e.activations) {
      for (double& v : vec) {
        const uint64_t bits = read_u64(in);
        std::memcpy(&v, &bits, 8);
      }
    }
  }
}

}  // namespace

void save_anchors(const AnchorSet& anchors, std::ostream& out) {
  out.write("RFAZ", 4);
  write_u32(out, 1);
  write_str(out, anchors.client);
  write_u32(out, anchors.pooling == Pooling::Mean ? 0 : 1);
  write_u32(out, static_cast<uint32_t>(anchors.layer_set.size()));
  for (int layer : anchors.layer_set) write_u32(out, static_cast<uint32_t>(layer));
  write_u32(out, static_cast<uint32_t>(anchors.query_anchors.size()));
  write_u32(out, static_cast<uint32_t>(anchors.doc_anchors.size()));
  write_u32(out, static_cast<uint32_t>(anchors.width));
  write_u64(out, anchors.seed);
  write_str(out, anchors.backend_fingerprint);
  write_vectors(out, anchors.query_anchors);
  write_vectors(out, anchors.doc_anchors);
  for (const AnchorEntry& e : anchors.query_anchors) write_str(out, e.source_text);
  for (const AnchorEntry& e : anchors.doc_anchors) write_str(out, e.source_text);
}

void save_anchors_file(const AnchorSet& anchors, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  save_anchors(anchors, out);
}

AnchorSet load_anchors(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RFAZ", 4) != 0) {
    throw Error(ErrorCode::ConfigInvalid, "not an RFAZ anchor file");
  }
  if (read_u32(in) != 1) throw Error(ErrorCode::ConfigInvalid, "unsupported RFAZ version");
  AnchorSet set;
  set.client = read_str(in);
  set.pooling = read_u32(in) == 0 ? Pooling::Mean : Pooling::LastToken;
  const uint32_t n_layers = read_u32(in);
  set.layer_set.resize(n_layers);
  for (uint32_t i = 0; i < n_layers; ++i) set.layer_set[i] = static_cast<int>(read_u32(in));
  const uint32_t n_query = read_u32(in);
  const uint32_t n_doc = read_u32(in);
  set.width = read_u32(in);
  set.seed = read_u64(in);
  set.backend_fingerprint = read_str(in);
  set.query_anchors.resize(n_query);
  set.doc_anchors.resize(n_doc);
  read_vectors(in, set.query_anchors, n_layers, set.width);
  read_vectors(in, set.doc_anchors, n_layers, set.width);
  for (AnchorEntry& e : set.query_anchors) e.source_text = read_str(in);
  for (AnchorEntry& e : set.doc_anchors) e.source_text = read_str(in);
  if (!in) throw Error(ErrorCode::IoError, "truncated RFAZ anchor file");
  return set;
}

AnchorSet load_anchors_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return load_anchors(in);
}

}  // namespace ragfire
