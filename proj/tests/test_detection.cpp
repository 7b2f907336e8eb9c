#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ragfire/anchors_io.hpp"
#include "ragfire/detection.hpp"
#include "ragfire/toylm.hpp"

using namespace ragfire;

namespace {

ToyLm& backend() {
  static ToyLm lm([] {
    ToyLmConfig c;
    c.layers = 2;
    c.width = 16;
    c.heads = 2;
    c.context = 96;
    c.seed = 21;
    return c;
  }());
  return lm;
}

std::vector<std::string> numbered_texts(const std::string& stem, size_t n) {
  std::vector<std::string> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(stem + " sample number " + std::to_string(i));
  return out;
}

// 1-D anchors on layer 0, for threshold-calibration tests.
AnchorSet synthetic_anchor_set(const std::vector<double>& values) {
  AnchorSet set;
  set.client = "test";
  set.layer_set = {0};
  set.width = 1;
  for (double v : values) {
    AnchorEntry e;
    e.source_text = "v" + std::to_string(v);
    e.activations = {{v}};
    set.query_anchors.push_back(e);
  }
  return set;
}

// Independent re-implementation of the documented sampling procedure:
// SplitMix64 stream, Lemire reduction, Fisher-Yates prefix.
std::vector<size_t> oracle_sample(size_t population, size_t n, uint64_t seed) {
  uint64_t state = seed;
  auto next = [&state]() {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  std::vector<size_t> idx(population);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t i = 0; i < n; ++i) {
    const uint64_t r = static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next()) * (population - i)) >> 64);
    std::swap(idx[i], idx[i + static_cast<size_t>(r)]);
  }
  idx.resize(n);
  return idx;
}

AsiScore one_layer_score(double normalized) {
  AsiScore s;
  s.layers = {0};
  s.raw = {normalized};
  s.normalized = {normalized};
  return s;
}

}  // namespace

TEST_CASE("extract_anchors with n equal to pool size anchors every text once") {
  const auto texts = numbered_texts("query about records", 8);
  const int layers[] = {0, 1};
  const AnchorSet set = extract_anchors(backend(), "alice", texts, {}, 8, layers, 42);
  REQUIRE(set.query_anchors.size() == 8);
  std::vector<std::string> sources;
  for (const auto& a : set.query_anchors) sources.push_back(a.source_text);
  std::sort(sources.begin(), sources.end());
  std::vector<std::string> expected = texts;
  std::sort(expected.begin(), expected.end());
  CHECK(sources == expected);
}

TEST_CASE("extract_anchors is deterministic under a fixed seed") {
  const auto texts = numbered_texts("billing question", 30);
  const auto docs = numbered_texts("billing passage", 10);
  const int layers[] = {0};
  const AnchorSet a = extract_anchors(backend(), "bob", texts, docs, 10, layers, 7);
  const AnchorSet b = extract_anchors(backend(), "bob", texts, docs, 10, layers, 7);
  REQUIRE(a.query_anchors.size() == b.query_anchors.size());
  for (size_t i = 0; i < a.query_anchors.size(); ++i) {
    CHECK(a.query_anchors[i].source_text == b.query_anchors[i].source_text);
    CHECK(a.query_anchors[i].activations == b.query_anchors[i].activations);
  }
}

TEST_CASE("anchor sampling equals the seeded Fisher-Yates oracle") {
  const auto texts = numbered_texts("record", 100);
  const int layers[] = {0};
  const uint64_t seed = 12345;
  const AnchorSet set = extract_anchors(backend(), "carol", texts, {}, 20, layers, seed);
  const auto expected_idx = oracle_sample(100, 20, seed);
  REQUIRE(set.query_anchors.size() == 20);
  for (size_t i = 0; i < 20; ++i) {
    CHECK(set.query_anchors[i].source_text == texts[expected_idx[i]]);
  }
}

TEST_CASE("extract_anchors rejects oversized requests") {
  const auto texts = numbered_texts("q", 3);
  const int layers[] = {0};
  try {
    extract_anchors(backend(), "dave", texts, {}, 4, layers, 1);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NotEnoughSamples);
  }
}

TEST_CASE("asi identities") {
  const std::vector<double> a = {1.5, -2.0, 0.25};
  const std::vector<std::vector<double>> self = {a};
  CHECK(asi(a, self) == std::pair<double, double>{0.0, 0.0});

  const std::vector<std::vector<double>> origin = {{0.0, 0.0}};
  CHECK(asi(std::vector<double>{1.0, 1.0}, origin) == std::pair<double, double>{2.0, 2.0});

  const std::vector<std::vector<double>> two = {{0.0, 0.0}, {2.0, 0.0}};
  CHECK(asi(std::vector<double>{1.0, 0.0}, two) == std::pair<double, double>{2.0, 1.0});
}

TEST_CASE("asi is anchor-permutation invariant and normalized = raw/n") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const size_t width = 2 + rng.below(6);
    const size_t count = 1 + rng.below(12);
    std::vector<double> target(width);
    for (double& v : target) v = rng.gaussian();
    std::vector<std::vector<double>> anchors(count, std::vector<double>(width));
    for (auto& a : anchors) {
      for (double& v : a) v = rng.gaussian();
    }
    const auto [raw, normalized] = asi(target, anchors);
    CHECK(normalized == raw / static_cast<double>(count));
    CHECK(raw >= 0.0);

    std::vector<std::vector<double>> shuffled = anchors;
    for (size_t i = shuffled.size(); i > 1; --i) {
      std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    }
    const auto [raw2, norm2] = asi(target, shuffled);
    CHECK(raw2 == raw);
    CHECK(norm2 == normalized);
  }

  // single anchor: asi is exactly the squared L2 distance
  const std::vector<double> t = {3.0, -4.0};
  const std::vector<std::vector<double>> one = {{0.0, 0.0}};
  CHECK(asi(t, one).first == 25.0);
}

TEST_CASE("score_text against an anchor source matches direct recomputation") {
  const auto texts = numbered_texts("inventory request", 6);
  const int layers[] = {0, 1};
  const AnchorSet set = extract_anchors(backend(), "erin", texts, {}, 6, layers, 3);

  const std::string& probe = set.query_anchors[2].source_text;
  const AsiScore score = score_text(backend(), probe, set, AnchorKind::Query);

  // oracle: embed every anchor text independently and average squared
  // distances to the remaining anchors (the self term is exactly zero)
  const auto probe_act = embed_text(backend(), probe, layers, Pooling::Mean);
  for (size_t li = 0; li < 2; ++li) {
    double raw = 0.0;
    for (const auto& anchor : set.query_anchors) {
      const auto act = embed_text(backend(), anchor.source_text, layers, Pooling::Mean);
      raw += squared_distance(probe_act[li], act[li]);
    }
    CHECK(score.normalized[li] == doctest::Approx(raw / 6.0).epsilon(1e-12));
  }
}

TEST_CASE("document scoring never touches query anchors") {
  const auto texts = numbered_texts("request", 5);
  const auto docs = numbered_texts("passage", 5);
  const int layers[] = {0};
  AnchorSet set = extract_anchors(backend(), "frank", texts, docs, 5, layers, 9);
  const AsiScore before = score_text(backend(), "a probe document", set, AnchorKind::Document);
  for (auto& anchor : set.query_anchors) {
    for (auto& layer : anchor.activations) {
      for (double& v : layer) v += 1000.0;
    }
  }
  const AsiScore after = score_text(backend(), "a probe document", set, AnchorKind::Document);
  CHECK(before.normalized == after.normalized);
}

TEST_CASE("match boundary is inclusive at tau") {
  const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};
  const double tau = 1.0;
  CHECK(match(one_layer_score(tau), tau, rule).decision == Decision::Accept);
  CHECK(match(one_layer_score(tau + 1e-12), tau, rule).decision == Decision::Reject);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(match(one_layer_score(1e18), inf, rule).decision == Decision::Accept);
}

TEST_CASE("accept set is upward closed in tau") {
  const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};
  Rng rng(77);
  for (int i = 0; i < 200; ++i) {
    const double score = rng.uniform() * 10.0;
    double t1 = rng.uniform() * 10.0;
    double t2 = rng.uniform() * 10.0;
    if (t1 > t2) std::swap(t1, t2);
    const bool accept1 = match(one_layer_score(score), t1, rule).decision == Decision::Accept;
    const bool accept2 = match(one_layer_score(score), t2, rule).decision == Decision::Accept;
    if (accept1) CHECK(accept2);
  }
}

TEST_CASE("nearest-rank percentile") {
  CHECK(nearest_rank_percentile({1, 2, 3, 4}, 100.0) == 4.0);
  CHECK(nearest_rank_percentile({4, 3, 2, 1}, 25.0) == 1.0);
  CHECK(nearest_rank_percentile({4, 3, 2, 1}, 50.0) == 2.0);
}

TEST_CASE("calibrate_threshold equals the leave-one-out oracle") {
  const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};

  AnchorSet identical = synthetic_anchor_set({2.0, 2.0, 2.0});
  CHECK(calibrate_threshold(identical, 99.0, rule) == 0.0);

  Rng rng(55);
  std::vector<double> values(50);
  for (double& v : values) v = rng.gaussian() * 3.0;
  AnchorSet set = synthetic_anchor_set(values);

  std::vector<double> loo;
  for (size_t i = 0; i < values.size(); ++i) {
    // raw ASI sums its per-anchor terms in ascending order; the oracle
    // replicates that documented canonical order
    std::vector<double> terms;
    for (size_t j = 0; j < values.size(); ++j) {
      if (j == i) continue;
      terms.push_back((values[i] - values[j]) * (values[i] - values[j]));
    }
    std::sort(terms.begin(), terms.end());
    double raw = 0.0;
    for (double t : terms) raw += t;
    loo.push_back(raw / static_cast<double>(values.size() - 1));
  }
  std::sort(loo.begin(), loo.end());
  const size_t rank = static_cast<size_t>(std::ceil(0.99 * 50.0));
  CHECK(calibrate_threshold(set, 99.0, rule) == loo[rank - 1]);
  CHECK(calibrate_threshold(set, 100.0, rule) == loo.back());

  AnchorSet lone = synthetic_anchor_set({1.0});
  try {
    calibrate_threshold(lone, 99.0, rule);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NotEnoughSamples);
  }
}

TEST_CASE("fit_classifier separates 1-D classes with a depth-1 tree") {
  std::vector<std::vector<double>> features;
  std::vector<std::string> labels;
  for (double v : {0.1, 0.4, 0.7, 0.9}) {
    features.push_back({v});
    labels.emplace_back(kBenignLabel);
  }
  for (double v : {2.5, 3.0, 4.2}) {
    features.push_back({v});
    labels.emplace_back("malicious");
  }
  const DecisionTree tree = fit_classifier(features, labels);
  REQUIRE(tree.nodes.size() == 3);
  CHECK_FALSE(tree.nodes[0].is_leaf());
  for (size_t i = 0; i < features.size(); ++i) {
    CHECK(tree.predict(features[i]) == labels[i]);
  }

  const DecisionTree again = fit_classifier(features, labels);
  CHECK(again.nodes.size() == tree.nodes.size());
  CHECK(again.nodes[0].feature == tree.nodes[0].feature);
  CHECK(again.nodes[0].split == tree.nodes[0].split);
}

TEST_CASE("fit_classifier root split equals exhaustive enumeration") {
  Rng rng(101);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<double>> features;
    std::vector<std::string> labels;
    const size_t n = 8 + rng.below(23);
    for (size_t i = 0; i < n; ++i) {
      features.push_back({rng.gaussian(), rng.gaussian()});
      labels.emplace_back(rng.below(2) == 0 ? kBenignLabel : "malicious");
    }
    bool two_classes = false;
    for (size_t i = 1; i < n; ++i) two_classes |= labels[i] != labels[0];
    if (!two_classes) labels[0] = labels[0] == kBenignLabel ? "malicious" : kBenignLabel;

    // oracle: enumerate every (feature, midpoint) candidate, scoring with the
    // canonical n*H form (integer x*log2(x) terms over ascending labels)
    auto scaled_entropy_of = [](const std::vector<std::string>& subset) {
      std::map<std::string, size_t> counts;
      for (const auto& l : subset) counts[l]++;
      auto xlog2x = [](size_t c) {
        return c == 0 ? 0.0 : static_cast<double>(c) * std::log2(static_cast<double>(c));
      };
      double sum = 0.0;
      for (const auto& [l, c] : counts) sum += xlog2x(c);
      return xlog2x(subset.size()) - sum;
    };
    const double parent_cost = scaled_entropy_of(labels);
    int best_feature = -1;
    double best_split = 0.0;
    double best_cost = parent_cost;
    for (int f = 0; f < 2; ++f) {
      std::vector<double> vals;
      for (const auto& row : features) vals.push_back(row[static_cast<size_t>(f)]);
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      for (size_t v = 0; v + 1 < vals.size(); ++v) {
        const double split = (vals[v] + vals[v + 1]) / 2.0;
        std::vector<std::string> left, right;
        for (size_t i = 0; i < n; ++i) {
          (features[i][static_cast<size_t>(f)] <= split ? left : right).push_back(labels[i]);
        }
        const double cost = scaled_entropy_of(left) + scaled_entropy_of(right);
        if (cost < best_cost) {
          best_cost = cost;
          best_feature = f;
          best_split = split;
        }
      }
    }

    const DecisionTree tree = fit_classifier(features, labels);
    if (best_feature < 0) {
      CHECK(tree.nodes[0].is_leaf());
    } else {
      CHECK(tree.nodes[0].feature == best_feature);
      CHECK(tree.nodes[0].split == best_split);
    }
  }
}

TEST_CASE("fit_classifier requires two classes") {
  std::vector<std::vector<double>> features = {{1.0}, {2.0}};
  std::vector<std::string> labels = {"benign", "benign"};
  try {
    fit_classifier(features, labels);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SingleClass);
  }
}

TEST_CASE("classify replays the tree's training predictions") {
  Rng rng(202);
  std::vector<std::vector<double>> features;
  std::vector<std::string> labels;
  static const char* names[] = {"benign", "reconnaissance", "exfiltration"};
  for (int i = 0; i < 40; ++i) {
    features.push_back({rng.gaussian(), rng.gaussian()});
    labels.emplace_back(names[rng.below(3)]);
  }
  const DecisionTree tree = fit_classifier(features, labels);
  for (size_t i = 0; i < features.size(); ++i) {
    AsiScore s;
    s.layers = {0, 1};
    s.raw = features[i];
    s.normalized = features[i];
    const RiskVerdict v = classify(s, tree);
    CHECK(*v.classifier_label == tree.training_predictions[i]);
    CHECK((v.decision == Decision::Accept) == (tree.training_predictions[i] == kBenignLabel));
  }

  AsiScore wrong;
  wrong.layers = {0};
  wrong.raw = {1.0};
  wrong.normalized = {1.0};
  try {
    classify(wrong, tree);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::LayoutMismatch);
  }
}

TEST_CASE("anchor files round-trip") {
  const auto texts = numbered_texts("roundtrip", 4);
  const auto docs = numbered_texts("doctrip", 3);
  const int layers[] = {0, 1};
  const AnchorSet set = extract_anchors(backend(), "grace", texts, docs, 4, layers, 13);

  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  save_anchors(set, buf);
  const AnchorSet loaded = load_anchors(buf);

  CHECK(loaded.client == set.client);
  CHECK(loaded.layer_set == set.layer_set);
  CHECK(loaded.seed == set.seed);
  CHECK(loaded.width == set.width);
  CHECK(loaded.backend_fingerprint == set.backend_fingerprint);
  REQUIRE(loaded.query_anchors.size() == set.query_anchors.size());
  REQUIRE(loaded.doc_anchors.size() == set.doc_anchors.size());
  for (size_t i = 0; i < set.query_anchors.size(); ++i) {
    CHECK(loaded.query_anchors[i].source_text == set.query_anchors[i].source_text);
    CHECK(loaded.query_anchors[i].activations == set.query_anchors[i].activations);
  }
  for (size_t i = 0; i < set.doc_anchors.size(); ++i) {
    CHECK(loaded.doc_anchors[i].activations == set.doc_anchors[i].activations);
  }
}

TEST_CASE("decision tree text serialization round-trips") {
  Rng rng(303);
  std::vector<std::vector<double>> features;
  std::vector<std::string> labels;
  for (int i = 0; i < 30; ++i) {
    features.push_back({rng.gaussian(), rng.gaussian()});
    labels.emplace_back(rng.below(2) == 0 ? "benign" : "poisoning");
  }
  const DecisionTree tree = fit_classifier(features, labels);
  std::stringstream buf;
  tree.save(buf);
  const DecisionTree loaded = DecisionTree::load(buf);
  CHECK(loaded.feature_count == tree.feature_count);
  for (int i = 0; i < 50; ++i) {
    const std::vector<double> probe = {rng.gaussian(), rng.gaussian()};
    CHECK(loaded.predict(probe) == tree.predict(probe));
  }
}
