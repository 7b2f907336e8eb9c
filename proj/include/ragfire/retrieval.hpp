#pragma once

#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ragfire/common.hpp"

namespace ragfire {

struct Document {
  std::string id;
  std::string role_owner;
  std::string text;
  std::optional<bool> poisoned;  // harness-only ground truth; never read by detection
};

inline constexpr int kEmbeddingDim = 256;

struct Embedding {
  std::vector<double> values;

  size_t width() const { return values.size(); }
  bool is_zero() const;
};

// Deterministic stand-in for a dense retriever: signed feature hashing of
// character 3-grams. Each 3-gram is FNV-1a-64 hashed; bucket = (hash >> 1)
// mod dim, sign from the hash's low bit; the result is L2-normalized. Text
// shorter than 3 bytes has no 3-grams and encodes to the zero vector.
Embedding encode(std::string_view text, int dim = kEmbeddingDim);

// a.b / (|a||b|), 0 if either norm is 0. Throws WidthMismatch.
double cosine(const Embedding& a, const Embedding& b);

struct ScoredDocument {
  Document doc;
  double score;
};

// Flat exhaustive-scan vector store. Top-k order: descending cosine, ties by
// ascending id; zero-embedding documents rank after everything else.
class VectorStore {
 public:
  explicit VectorStore(bool harness_mode = false, int dim = kEmbeddingDim)
      : harness_mode_(harness_mode), dim_(dim) {}

  // Replaces entries whose id already exists; ids must be unique within the
  // batch. Returns the batch size.
  size_t ingest(std::span<const Document> docs);

  // Harness-only corpus poisoning: refused unless harness mode was enabled at
  // construction. Injected documents carry poisoned = true.
  size_t inject_poison(std::span<const Document> docs);

  std::vector<ScoredDocument> retrieve(std::string_view query, size_t k,
                                       const std::optional<std::string>& role_filter = {}) const;

  size_t size() const;
  bool contains(const std::string& id) const;
  std::vector<Document> documents() const;
  void clear();

  int dim() const { return dim_; }
  bool harness_mode() const { return harness_mode_; }

 private:
  struct Entry {
    Document doc;
    Embedding embedding;
  };

  mutable std::shared_mutex mutex_;
  std::map<std::string, Entry> entries_;
  bool harness_mode_;
  int dim_;
};

// Corpus file format: one UTF-8 document per line,
//   id <TAB> role <TAB> text [<TAB> "poisoned"]
// with backslash escapes for tab, newline, carriage return and backslash
// inside the text field.
std::vector<Document> load_corpus_file(const std::string& path);
void save_corpus_file(const std::string& path, std::span<const Document> docs);
std::string corpus_escape(std::string_view raw);
std::string corpus_unescape(std::string_view field);

}  // namespace ragfire
