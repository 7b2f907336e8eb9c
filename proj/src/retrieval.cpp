#include "ragfire/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <set>

namespace ragfire {

bool Embedding::is_zero() const {
  for (double v : values) {
    if (v != 0.0) return false;
  }
  return true;
}

Embedding encode(std::string_view text, int dim) {
  Embedding e;
  e.values.assign(static_cast<size_t>(dim), 0.0);
  if (text.size() >= 3) {
    for (size_t i = 0; i + 3 <= text.size(); ++i) {
      const uint64_t h = fnv1a64(text.substr(i, 3));
      const size_t bucket = static_cast<size_t>((h >> 1) % static_cast<uint64_t>(dim));
      e.values[bucket] += (h & 1) ? 1.0 : -1.0;
    }
    double norm_sq = 0.0;
    for (double v : e.values) norm_sq += v * v;
    if (norm_sq > 0.0) {
      const double inv = 1.0 / std::sqrt(norm_sq);
      for (double& v : e.values) v *= inv;
    }
  }
  return e;
}

double cosine(const Embedding& a, const Embedding& b) {
  if (a.width() != b.width()) {
    throw Error(ErrorCode::WidthMismatch, "cosine of " + std::to_string(a.width()) + " vs " +
                                              std::to_string(b.width()));
  }
  double dot_ab = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    dot_ab += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot_ab / (std::sqrt(na) * std::sqrt(nb));
}

size_t VectorStore::ingest(std::span<const Document> docs) {
  std::set<std::string> seen;
  for (const Document& d : docs) {
    if (!seen.insert(d.id).second) {
      throw Error(ErrorCode::DuplicateIdWithinBatch, "id '" + d.id + "'");
    }
  }
  std::unique_lock lock(mutex_);
  for (const Document& d : docs) {
    entries_[d.id] = Entry{d, encode(d.text, dim_)};
  }
  return docs.size();
}

size_t VectorStore::inject_poison(std::span<const Document> docs) {
  if (!harness_mode_) {
    throw Error(ErrorCode::ProductionModeRefusal, "poison injection requires harness mode");
  }
  std::unique_lock lock(mutex_);
  for (const Document& d : docs) {
    Document marked = d;
    marked.poisoned = true;
    entries_[marked.id] = Entry{marked, encode(marked.text, dim_)};
  }
  return docs.size();
}

std::vector<ScoredDocument> VectorStore::retrieve(
    std::string_view query, size_t k, const std::optional<std::string>& role_filter) const {
  if (k < 1) throw Error(ErrorCode::ConfigInvalid, "retrieve needs k >= 1");
  const Embedding q = encode(query, dim_);

  std::shared_lock lock(mutex_);
  if (entries_.empty()) throw Error(ErrorCode::EmptyStore, "no documents ingested");

  struct Candidate {
    const Entry* entry;
    double score;
    bool zero;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(entries_.size());
  for (const auto& [id, entry] : entries_) {
    if (role_filter.has_value() && entry.doc.role_owner != *role_filter) continue;
    candidates.push_back({&entry, cosine(q, entry.embedding), entry.embedding.is_zero()});
  }
  // entries_ iterates in ascending id order; a stable sort on (zero, -score)
  // therefore breaks score ties by ascending id.
  std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.zero != b.zero) return !a.zero;
    return a.score > b.score;
  });
  if (candidates.size() > k) candidates.resize(k);

  std::vector<ScoredDocument> out;
  out.reserve(candidates.size());
  for (const Candidate& c : candidates) out.push_back({c.entry->doc, c.score});
  return out;
}

size_t VectorStore::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

bool VectorStore::contains(const std::string& id) const {
  std::shared_lock lock(mutex_);
  return entries_.count(id) > 0;
}

std::vector<Document> VectorStore::documents() const {
  std::shared_lock lock(mutex_);
  std::vector<Document> out;
  out.reserve(entries_.size());
  for (const auto& [id, entry] : entries_) out.push_back(entry.doc);
  return out;
}

void VectorStore::clear() {
  std::unique_lock lock(mutex_);
  entries_.clear();
}

}  // namespace ragfire
