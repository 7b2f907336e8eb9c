#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ragfire/retrieval.hpp"

namespace ragfire {

enum class Risk { Reconnaissance, Exfiltration, Unauthorized, Poisoning, Hijacking };

const char* risk_name(Risk risk);
Risk risk_from_name(std::string_view name);
inline constexpr Risk kAllRisks[] = {Risk::Reconnaissance, Risk::Exfiltration,
                                     Risk::Unauthorized, Risk::Poisoning, Risk::Hijacking};

// One labeled attack instance. Query risks carry `query`; poisoning and
// hijacking carry `document`. `malicious` is evaluation ground truth only.
struct AttackSample {
  Risk risk = Risk::Reconnaissance;
  std::string id;
  std::string query;
  Document document;
  bool is_document = false;
  std::string source_role;
  std::string target_role;
  std::string template_id;
  uint64_t seed = 0;
  bool malicious = true;

  const std::string& text() const { return is_document ? document.text : query; }
};

// ---- bundled synthetic corpus ----------------------------------------------
// A deterministic four-role corpus (medical, finance, logistics, hr) built
// from per-role templates with seeded slot fills; the desk-scale analog of a
// multi-role hospital knowledge base.
struct SyntheticCorpus {
  std::vector<std::string> roles;
  std::map<std::string, std::vector<std::string>> queries;    // per role
  std::map<std::string, std::vector<Document>> documents;     // per role

  std::vector<Document> all_documents() const;
  const std::vector<std::string>& role_queries(const std::string& role) const;
  std::vector<std::string> role_document_texts(const std::string& role) const;
};

SyntheticCorpus build_synthetic_corpus(size_t queries_per_role, size_t docs_per_role,
                                       uint64_t seed);

// ---- attack generators ------------------------------------------------------

std::vector<AttackSample> gen_reconnaissance(size_t n, uint64_t seed);

// Ten exfiltration families filled round-robin: n = 1000 yields exactly 100
// per family. Every rendered sample names at least one PII kind.
std::vector<AttackSample> gen_exfiltration(size_t n, uint64_t seed);

std::vector<AttackSample> gen_unauthorized(const std::string& requester_role,
                                           const std::string& target_role,
                                           std::span<const Document> target_corpus, size_t n,
                                           uint64_t seed);

std::vector<AttackSample> gen_poisoned_docs(std::span<const std::string> legit_queries,
                                            std::span<const std::string> misinformation_bank,
                                            size_t n, uint64_t seed,
                                            const std::string& role_owner = "collector");

std::vector<AttackSample> gen_hijack_docs(std::span<const std::string> legit_queries,
                                          const std::string& hijack_topic, size_t n,
                                          uint64_t seed,
                                          const std::string& role_owner = "collector");

// ---- adaptive attack --------------------------------------------------------

class SynonymLexicon {
 public:
  explicit SynonymLexicon(std::map<std::string, std::vector<std::string>> entries)
      : entries_(std::move(entries)) {}

  const std::vector<std::string>* find(const std::string& lowercase_word) const;
  size_t size() const { return entries_.size(); }

  // The bundled static table (~500 entries, lowercase keys).
  static const SynonymLexicon& bundled();

 private:
  std::map<std::string, std::vector<std::string>> entries_;
};

// Replaces exactly min(n, replaceable) distinct word positions with seeded
// synonyms; everything else (whitespace, punctuation, untouched words) is
// preserved byte for byte.
std::string synonym_perturb(const std::string& query, size_t n, uint64_t seed,
                            const SynonymLexicon& lexicon = SynonymLexicon::bundled());

// Word positions (maximal ASCII-letter runs) of a text; exposed for diff
// checks in tests and the adaptive bench.
std::vector<std::pair<size_t, size_t>> word_spans(std::string_view text);

// Lowercased trigrams of consecutive words ("ignore the previous", ...); the
// unit of the template-disjointness measurements.
std::vector<std::string> word_trigrams(std::string_view text);

// ---- bundled banks ----------------------------------------------------------

const std::vector<std::string>& misinformation_bank();
const std::vector<std::string>& reconnaissance_templates();
const std::vector<std::pair<std::string, std::string>>& exfiltration_families();  // (name, template)
const std::vector<std::string>& hijack_segments();

// ---- suite export -----------------------------------------------------------

// Labels sidecar: one line per sample,
//   id <TAB> risk <TAB> malicious <TAB> source_role <TAB> target_role
//      <TAB> template_id <TAB> seed
void save_labels_file(const std::string& path, std::span<const AttackSample> samples);

}  // namespace ragfire
