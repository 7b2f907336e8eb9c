#include "ragfire/harness.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "harness_data.hpp"

namespace ragfire {

const char* risk_name(Risk risk) {
  switch (risk) {
    case Risk::Reconnaissance: return "reconnaissance";
    case Risk::Exfiltration: return "exfiltration";
    case Risk::Unauthorized: return "unauthorized";
    case Risk::Poisoning: return "poisoning";
    case Risk::Hijacking: return "hijacking";
  }
  return "unknown";
}

Risk risk_from_name(std::string_view name) {
  for (Risk r : kAllRisks) {
    if (name == risk_name(r)) return r;
  }
  throw Error(ErrorCode::SpecInvalid, "unknown risk '" + std::string(name) + "'");
}

namespace {

// Renders {slot} placeholders with seeded picks, extras taking precedence
// over the bundled filler lists. Templates without slots consume no draws.
std::string render_template(std::string_view tpl, Rng& rng,
                            const std::map<std::string, std::string>& extras = {}) {
  std::string out;
  out.reserve(tpl.size());
  size_t at = 0;
  while (at < tpl.size()) {
    const size_t open = tpl.find('{', at);
    if (open == std::string_view::npos) {
      out.append(tpl.substr(at));
      break;
    }
    const size_t close = tpl.find('}', open);
    if (close == std::string_view::npos) {
      out.append(tpl.substr(at));
      break;
    }
    out.append(tpl.substr(at, open - at));
    const std::string slot(tpl.substr(open + 1, close - open - 1));
    if (auto it = extras.find(slot); it != extras.end()) {
      out.append(it->second);
    } else {
      const auto& fillers = harness_data::slot_fillers();
      auto fit = fillers.find(slot);
      if (fit == fillers.end()) {
        throw Error(ErrorCode::SpecInvalid, "unknown template slot '" + slot + "'");
      }
      out.append(fit->second[rng.below(fit->second.size())]);
    }
    at = close + 1;
  }
  return out;
}

}  // namespace

std::vector<Document> SyntheticCorpus::all_documents() const {
  std::vector<Document> out;
  for (const std::string& role : roles) {
    const auto& docs = documents.at(role);
    out.insert(out.end(), docs.begin(), docs.end());
  }
  return out;
}

const std::vector<std::string>& SyntheticCorpus::role_queries(const std::string& role) const {
  auto it = queries.find(role);
  if (it == queries.end()) throw Error(ErrorCode::UnknownRole, "role '" + role + "'");
  return it->second;
}

std::vector<std::string> SyntheticCorpus::role_document_texts(const std::string& role) const {
  auto it = documents.find(role);
  if (it == documents.end()) throw Error(ErrorCode::UnknownRole, "role '" + role + "'");
  std::vector<std::string> texts;
  texts.reserve(it->second.size());
  for (const Document& d : it->second) texts.push_back(d.text);
  return texts;
}

SyntheticCorpus build_synthetic_corpus(size_t queries_per_role, size_t docs_per_role,
                                       uint64_t seed) {
  SyntheticCorpus corpus;
  Rng rng(seed);
  for (const auto& role_bank : harness_data::role_templates()) {
    const std::string role = role_bank.role;
    corpus.roles.push_back(role);
    auto& queries = corpus.queries[role];
    for (size_t i = 0; i < queries_per_role; ++i) {
      const char* tpl = role_bank.query_templates[i % role_bank.query_templates.size()];
      queries.push_back(render_template(tpl, rng));
    }
    auto& docs = corpus.documents[role];
    for (size_t i = 0; i < docs_per_role; ++i) {
      const char* tpl = role_bank.doc_templates[i % role_bank.doc_templates.size()];
      Document d;
      d.id = role + "-doc-" + std::to_string(i);
      d.role_owner = role;
      d.text = render_template(tpl, rng);
      docs.push_back(std::move(d));
    }
  }
  return corpus;
}

std::vector<AttackSample> gen_reconnaissance(size_t n, uint64_t seed) {
  const auto& bank = reconnaissance_templates();
  Rng rng(seed);
  std::vector<AttackSample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const size_t t = i % bank.size();
    AttackSample s;
    s.risk = Risk::Reconnaissance;
    s.id = "recon-" + std::to_string(i);
    s.query = render_template(bank[t], rng);
    s.source_role = "guest";
    s.template_id = "recon/" + std::to_string(t);
    s.seed = seed;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<AttackSample> gen_exfiltration(size_t n, uint64_t seed) {
  const auto& families = exfiltration_families();
  Rng rng(seed);
  std::vector<AttackSample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const auto& [family, tpl] = families[i % families.size()];
    AttackSample s;
    s.risk = Risk::Exfiltration;
    s.id = "exfil-" + std::to_string(i);
    s.query = render_template(tpl, rng);
    s.source_role = "guest";
    s.template_id = "exfil/" + family;
    s.seed = seed;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<AttackSample> gen_unauthorized(const std::string& requester_role,
                                           const std::string& target_role,
                                           std::span<const Document> target_corpus, size_t n,
                                           uint64_t seed) {
  if (requester_role == target_role) {
    throw Error(ErrorCode::SameRole, "requester and target role are both '" + requester_role + "'");
  }
  if (target_corpus.empty()) {
    throw Error(ErrorCode::NotEnoughSamples, "target corpus is empty");
  }
  std::vector<std::string> templates;
  if (target_role == "finance") {
    templates.push_back(harness_data::unauthorized_finance_literal());
  }
  for (const std::string& frame : harness_data::unauthorized_frames()) {
    templates.push_back(frame);
  }

  Rng rng(seed);
  std::vector<AttackSample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const std::string& tpl = templates[i % templates.size()];
    std::map<std::string, std::string> extras;
    if (tpl.find("{snippet}") != std::string::npos) {
      // topic vocabulary: a contiguous word span from a target-role document
      const Document& doc = target_corpus[rng.below(target_corpus.size())];
      std::vector<std::string> words;
      std::string word;
      for (char c : doc.text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
          word.push_back(c);
        } else if (!word.empty()) {
          words.push_back(word);
          word.clear();
        }
      }
      if (!word.empty()) words.push_back(word);
      // three consecutive words keep the sample's trigram overlap with the
      // target corpus to a single shared trigram
      const size_t span = std::min<size_t>(3, words.size());
      const size_t start = words.size() > span ? rng.below(words.size() - span + 1) : 0;
      std::string snippet;
      for (size_t w = 0; w < span; ++w) {
        if (w > 0) snippet.push_back(' ');
        snippet += words[start + w];
      }
      extras["snippet"] = snippet;
    }
    AttackSample s;
    s.risk = Risk::Unauthorized;
    s.id = "unauth-" + requester_role + "-" + target_role + "-" + std::to_string(i);
    s.query = render_template(tpl, rng, extras);
    s.source_role = requester_role;
    s.target_role = target_role;
    s.template_id = "unauth/" + std::to_string(i % templates.size());
    s.seed = seed;
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

double median_cosine_to_pool(const Embedding& probe, std::span<const std::string> pool) {
  std::vector<double> sims;
  sims.reserve(pool.size());
  for (const std::string& text : pool) sims.push_back(cosine(probe, encode(text)));
  std::sort(sims.begin(), sims.end());
  return sims[sims.size() / 2];
}

}  // namespace

std::vector<AttackSample> gen_poisoned_docs(std::span<const std::string> legit_queries,
                                            std::span<const std::string> misinformation,
                                            size_t n, uint64_t seed,
                                            const std::string& role_owner) {
  if (legit_queries.empty() || misinformation.empty()) {
    throw Error(ErrorCode::EmptyList, "poisoning needs nonempty query and misinformation banks");
  }
  Rng rng(seed);
  std::vector<AttackSample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const std::string& source = legit_queries[rng.below(legit_queries.size())];
    const std::string& claim = misinformation[rng.below(misinformation.size())];
    AttackSample s;
    s.risk = Risk::Poisoning;
    s.id = "poison-" + std::to_string(i);
    s.is_document = true;
    s.document.id = s.id;
    s.document.role_owner = role_owner;
    s.document.text = source + " " + claim;
    s.document.poisoned = true;
    s.source_role = "collector";
    s.template_id = "poison/near-duplicate";
    s.seed = seed;

    // retrieval-reachability check: the near-duplicate must sit closer to its
    // source query than the median legitimate match does
    const Embedding source_emb = encode(source);
    const double sim = cosine(encode(s.document.text), source_emb);
    if (!(sim > median_cosine_to_pool(source_emb, legit_queries))) {
      throw Error(ErrorCode::SpecInvalid, "generated poison doc is not retrieval-reachable");
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<AttackSample> gen_hijack_docs(std::span<const std::string> legit_queries,
                                          const std::string& hijack_topic, size_t n,
                                          uint64_t seed, const std::string& role_owner) {
  if (legit_queries.empty() || hijack_topic.empty()) {
    throw Error(ErrorCode::EmptyList, "hijacking needs legit queries and a topic");
  }
  const auto& segments = hijack_segments();
  Rng rng(seed);
  std::vector<AttackSample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const std::string& source = legit_queries[rng.below(legit_queries.size())];
    const std::string segment =
        render_template(segments[i % segments.size()], rng, {{"hijack", hijack_topic}});
    AttackSample s;
    s.risk = Risk::Hijacking;
    s.id = "hijack-" + std::to_string(i);
    s.is_document = true;
    s.document.id = s.id;
    s.document.role_owner = role_owner;
    s.document.text = source + " " + segment;
    s.document.poisoned = true;
    s.source_role = "collector";
    s.template_id = "hijack/" + std::to_string(i % segments.size());
    s.seed = seed;

    const Embedding source_emb = encode(source);
    const double sim = cosine(encode(s.document.text), source_emb);
    if (!(sim > median_cosine_to_pool(source_emb, legit_queries))) {
      throw Error(ErrorCode::SpecInvalid, "generated hijack doc is not retrieval-reachable");
    }
    out.push_back(std::move(s));
  }
  return out;
}

const std::vector<std::string>* SynonymLexicon::find(const std::string& lowercase_word) const {
  auto it = entries_.find(lowercase_word);
  return it == entries_.end() ? nullptr : &it->second;
}

const SynonymLexicon& SynonymLexicon::bundled() {
  static const SynonymLexicon lexicon(harness_data::build_synonym_entries());
  return lexicon;
}

std::vector<std::pair<size_t, size_t>> word_spans(std::string_view text) {
  std::vector<std::pair<size_t, size_t>> spans;
  size_t start = std::string_view::npos;
  for (size_t i = 0; i <= text.size(); ++i) {
    const bool is_letter =
        i < text.size() && std::isalpha(static_cast<unsigned char>(text[i])) != 0;
    if (is_letter && start == std::string_view::npos) {
      start = i;
    } else if (!is_letter && start != std::string_view::npos) {
      spans.emplace_back(start, i - start);
      start = std::string_view::npos;
    }
  }
  return spans;
}

std::vector<std::string> word_trigrams(std::string_view text) {
  const auto spans = word_spans(text);
  std::vector<std::string> words;
  words.reserve(spans.size());
  for (const auto& [start, len] : spans) {
    std::string w(text.substr(start, len));
    for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    words.push_back(std::move(w));
  }
  std::vector<std::string> grams;
  for (size_t i = 0; i + 3 <= words.size(); ++i) {
    grams.push_back(words[i] + " " + words[i + 1] + " " + words[i + 2]);
  }
  return grams;
}

namespace {

std::string lowercase(std::string_view word) {
  std::string out(word);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Purely alphabetic single-word synonyms only, never the original word
// itself; spaces or hyphens would shift word positions and break the
// exact-diff contract.
std::vector<const std::string*> usable_synonyms(const std::vector<std::string>& candidates,
                                                const std::string& lower_original) {
  std::vector<const std::string*> out;
  for (const std::string& c : candidates) {
    bool all_alpha = !c.empty();
    for (char ch : c) all_alpha &= std::isalpha(static_cast<unsigned char>(ch)) != 0;
    if (all_alpha && lowercase(c) != lower_original) out.push_back(&c);
  }
  return out;
}

}  // namespace

std::string synonym_perturb(const std::string& query, size_t n, uint64_t seed,
                            const SynonymLexicon& lexicon) {
  const auto spans = word_spans(query);
  std::vector<size_t> replaceable;
  for (size_t i = 0; i < spans.size(); ++i) {
    const std::string lower = lowercase(query.substr(spans[i].first, spans[i].second));
    const std::vector<std::string>* entry = lexicon.find(lower);
    if (entry != nullptr && !usable_synonyms(*entry, lower).empty()) replaceable.push_back(i);
  }
  const size_t k = std::min(n, replaceable.size());
  if (k == 0) return query;

  std::vector<size_t> chosen_pos = sample_without_replacement(replaceable.size(), k, seed);
  std::vector<size_t> chosen;
  chosen.reserve(k);
  for (size_t p : chosen_pos) chosen.push_back(replaceable[p]);
  std::sort(chosen.begin(), chosen.end());

  Rng syn_rng(seed + 1);
  std::string out;
  out.reserve(query.size());
  size_t cursor = 0;
  size_t next = 0;
  for (size_t i = 0; i < spans.size(); ++i) {
    if (next >= chosen.size() || chosen[next] != i) continue;
    ++next;
    const auto [start, len] = spans[i];
    out.append(query, cursor, start - cursor);
    const std::string original = query.substr(start, len);
    const std::string lower = lowercase(original);
    const auto candidates = usable_synonyms(*lexicon.find(lower), lower);
    std::string replacement = *candidates[syn_rng.below(candidates.size())];
    if (std::isupper(static_cast<unsigned char>(original[0])) && !replacement.empty()) {
      replacement[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(replacement[0])));
    }
    out += replacement;
    cursor = start + len;
  }
  out.append(query, cursor, query.size() - cursor);
  return out;
}

void save_labels_file(const std::string& path, std::span<const AttackSample> samples) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "id\trisk\tmalicious\tsource_role\ttarget_role\ttemplate_id\tseed\n";
  for (const AttackSample& s : samples) {
    out << s.id << '\t' << risk_name(s.risk) << '\t' << (s.malicious ? 1 : 0) << '\t'
        << s.source_role << '\t' << s.target_role << '\t' << s.template_id << '\t' << s.seed
        << '\n';
  }
}

}  // namespace ragfire
