#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ragfire/retrieval.hpp"

using namespace ragfire;

namespace {

std::string random_words(Rng& rng, size_t n_words) {
  static const char* vocab[] = {"alpha", "beta",  "gamma", "delta", "omega", "sigma",
                                "tensor", "query", "index", "vault", "ledger", "triage",
                                "binder", "metric", "policy", "packet"};
  std::string out;
  for (size_t i = 0; i < n_words; ++i) {
    if (i > 0) out.push_back(' ');
    out += vocab[rng.below(16)];
  }
  return out;
}

std::vector<Document> random_corpus(Rng& rng, size_t n) {
  std::vector<Document> docs;
  docs.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    char id[24];
    std::snprintf(id, sizeof(id), "d%04zu", i);
    docs.push_back({id, i % 2 == 0 ? "even" : "odd", random_words(rng, 3 + rng.below(8)), {}});
  }
  return docs;
}

// Independent exhaustive-scan oracle with the documented tie rule.
std::vector<std::string> brute_force_ids(const std::vector<Document>& docs,
                                         const std::string& query, size_t k, int dim) {
  struct Row {
    std::string id;
    double score;
    bool zero;
  };
  const Embedding q = encode(query, dim);
  std::vector<Row> rows;
  for (const Document& d : docs) {
    const Embedding e = encode(d.text, dim);
    double dot = 0.0, nq = 0.0, nd = 0.0;
    for (size_t i = 0; i < e.values.size(); ++i) {
      dot += q.values[i] * e.values[i];
      nq += q.values[i] * q.values[i];
      nd += e.values[i] * e.values[i];
    }
    const double score = (nq == 0.0 || nd == 0.0) ? 0.0 : dot / (std::sqrt(nq) * std::sqrt(nd));
    rows.push_back({d.id, score, nd == 0.0});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.zero != b.zero) return !a.zero;
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  std::vector<std::string> ids;
  for (size_t i = 0; i < std::min(k, rows.size()); ++i) ids.push_back(rows[i].id);
  return ids;
}

}  // namespace

TEST_CASE("encode is deterministic with unit norm") {
  const Embedding a = encode("some text to hash");
  const Embedding b = encode("some text to hash");
  CHECK(a.values == b.values);

  double norm = 0.0;
  for (double v : a.values) norm += v * v;
  CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-9);

  CHECK(encode("").is_zero());
  CHECK(encode("ab").is_zero());  // shorter than one 3-gram
}

TEST_CASE("cosine analytic values") {
  const Embedding e1{{1, 0}};
  const Embedding e2{{0, 1}};
  const Embedding e3{{1, 1}};
  CHECK(cosine(e1, e1) == doctest::Approx(1.0));
  CHECK(cosine(e1, e2) == doctest::Approx(0.0));
  CHECK(cosine(e3, e1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(cosine(Embedding{{0, 0}}, e1) == 0.0);

  try {
    cosine(e1, Embedding{{1, 2, 3}});
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::WidthMismatch);
  }
}

TEST_CASE("ingest counts and replaces by id") {
  VectorStore store;
  std::vector<Document> batch = {
      {"a", "r1", "alpha beta gamma", {}},
      {"b", "r1", "delta omega sigma", {}},
      {"c", "r2", "tensor query index", {}},
  };
  CHECK(store.ingest(batch) == 3);
  CHECK(store.size() == 3);
  CHECK(store.ingest(batch) == 3);
  CHECK(store.size() == 3);

  const auto top = store.retrieve("delta omega sigma", 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0].doc.id == "b");

  std::vector<Document> dup = {{"x", "r", "one", {}}, {"x", "r", "two", {}}};
  try {
    store.ingest(dup);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DuplicateIdWithinBatch);
  }
}

TEST_CASE("retrieve with k >= store size returns everything ordered") {
  VectorStore store;
  Rng rng(5);
  store.ingest(random_corpus(rng, 12));
  const auto all = store.retrieve("alpha beta", 50);
  CHECK(all.size() == 12);
  for (size_t i = 1; i < all.size(); ++i) {
    CHECK(all[i - 1].score >= all[i].score);
  }
}

TEST_CASE("retrieve equals brute-force oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 6; ++trial) {
    const auto docs = random_corpus(rng, 20 + rng.below(120));
    VectorStore store;
    store.ingest(docs);
    for (int q = 0; q < 20; ++q) {
      const std::string query = random_words(rng, 2 + rng.below(6));
      const auto got = store.retrieve(query, 5);
      const auto expected = brute_force_ids(docs, query, 5, store.dim());
      std::vector<std::string> got_ids;
      for (const auto& r : got) got_ids.push_back(r.doc.id);
      CHECK(got_ids == expected);
    }
  }
}

TEST_CASE("empty-text documents rank last") {
  VectorStore store;
  store.ingest(std::vector<Document>{
      {"empty", "r", "", {}},
      {"full", "r", "alpha beta gamma", {}},
  });
  const auto out = store.retrieve("unrelated words entirely", 2);
  REQUIRE(out.size() == 2);
  CHECK(out[1].doc.id == "empty");
}

TEST_CASE("role filter restricts candidates") {
  VectorStore store;
  Rng rng(9);
  store.ingest(random_corpus(rng, 10));
  const auto only_even = store.retrieve("alpha", 10, std::string("even"));
  CHECK(only_even.size() == 5);
  for (const auto& r : only_even) CHECK(r.doc.role_owner == "even");
}

TEST_CASE("retrieve on an empty store fails") {
  VectorStore store;
  try {
    store.retrieve("anything", 1);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyStore);
  }
}

TEST_CASE("inject_poison requires harness mode") {
  VectorStore prod(false);
  std::vector<Document> poison = {{"p1", "r", "bad content", true}};
  try {
    prod.inject_poison(poison);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ProductionModeRefusal);
  }
}

TEST_CASE("poisoned near-duplicate outranks the original for its source query") {
  Rng rng(23);
  VectorStore store(true);
  const auto docs = random_corpus(rng, 100);
  store.ingest(docs);
  CHECK(store.size() == 100);

  const std::string query = "ledger policy packet triage vault";
  store.ingest(std::vector<Document>{{"victim", "r", "ledger policy metric", {}}});
  // d* = the legitimate query text plus an appended payload
  std::vector<Document> poison = {{"zpoison", "r", query + " plus planted payload", true}};
  CHECK(store.inject_poison(poison) == 1);
  CHECK(store.size() == 102);

  const auto top = store.retrieve(query, 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0].doc.id == "zpoison");
  CHECK(top[0].doc.poisoned.value_or(false));
}

TEST_CASE("corpus file round-trips awkward text") {
  const std::string path = (std::filesystem::temp_directory_path() / "rf_corpus_test.tsv").string();
  std::vector<Document> docs = {
      {"a", "role1", "plain text", {}},
      {"b", "role2", "tab\there and\nnewline and \\backslash", {}},
      {"c", "role1", "poisoned entry", true},
  };
  save_corpus_file(path, docs);
  const auto loaded = load_corpus_file(path);
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[0].text == docs[0].text);
  CHECK(loaded[1].text == docs[1].text);
  CHECK(loaded[2].poisoned.value_or(false));
  CHECK_FALSE(loaded[0].poisoned.has_value());
  std::filesystem::remove(path);
}
