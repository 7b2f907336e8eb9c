#include "ragfire/bench.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace ragfire {

using nlohmann::json;

namespace {

std::string layers_tag(const std::vector<int>& layers) {
  std::string out;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (i > 0) out.push_back('-');
    out += std::to_string(layers[i]);
  }
  return out;
}

std::string spec_signature(const ExperimentSpec& s) {
  std::ostringstream sig;
  sig << "risks=";
  for (Risk r : s.risks) sig << risk_name(r) << ";";
  sig << " qpr=" << s.queries_per_role << " dpr=" << s.docs_per_role
      << " seeds=" << s.corpus_seed << "," << s.attack_seed << "," << s.anchor_seed << ","
      << s.shuffle_seed << "," << s.pronet_seed << " counts=";
  for (size_t c : s.anchor_counts) sig << c << ";";
  sig << " layers=";
  for (const auto& ls : s.layer_sets) sig << layers_tag(ls) << ";";
  sig << " eval=" << s.eval_benign << "/" << s.eval_attack << " pct=" << s.percentile
      << " shuffles=" << s.null_shuffles << " client=" << s.client_role << ">"
      << s.unauthorized_target << " pool=" << pooling_name(s.pooling) << " pronet=r"
      << s.pronet_rank << ",l" << s.pronet_layer << ",ls" << layers_tag(s.pronet_layer_set)
      << ",eps" << s.epsilon << ",a" << s.alpha << ",st" << s.train_steps << ",lr" << s.train_lr
      << ",b" << s.train_batch << " harmless=" << s.harmless_queries << " adaptN=" << s.adaptive_n
      << " backend=" << s.backend.layers << "x" << s.backend.width << "x" << s.backend.heads
      << "c" << s.backend.context << "s" << s.backend.seed << " pre="
      << (s.pretrain_backend ? s.pretrain.steps : 0);
  return sig.str();
}

std::string csv_preamble(const ExperimentSpec& s) {
  std::ostringstream out;
  out << "# config_hash=" << to_hex(s.config_hash()) << "\n";
  out << "# seeds corpus=" << s.corpus_seed << " attack=" << s.attack_seed
      << " anchor=" << s.anchor_seed << " shuffle=" << s.shuffle_seed
      << " pronet=" << s.pronet_seed << "\n";
  return out.str();
}

// First-n prefix of an anchor set. Sampling is a Fisher-Yates prefix, so the
// first n picks of a larger extraction equal an extraction of n directly.
AnchorSet anchor_prefix(const AnchorSet& full, size_t n_queries, size_t n_docs) {
  AnchorSet out = full;
  if (out.query_anchors.size() > n_queries) out.query_anchors.resize(n_queries);
  if (out.doc_anchors.size() > n_docs) out.doc_anchors.resize(n_docs);
  return out;
}

struct EmbeddedSuite {
  Risk risk = Risk::Reconnaissance;
  AnchorKind kind = AnchorKind::Query;
  std::vector<std::vector<std::vector<double>>> benign;   // per text, per layer
  std::vector<std::vector<std::vector<double>>> attacks;  // per text, per layer
};

double layer_mean_asi(const std::vector<std::vector<double>>& pooled, const AnchorSet& anchors,
                      AnchorKind kind) {
  const auto& entries = kind == AnchorKind::Query ? anchors.query_anchors : anchors.doc_anchors;
  AsiScore s;
  s.layers = anchors.layer_set;
  std::vector<double> terms(entries.size());
  for (size_t li = 0; li < anchors.layer_set.size(); ++li) {
    for (size_t j = 0; j < entries.size(); ++j) {
      terms[j] = squared_distance(pooled[li], entries[j].activations[li]);
    }
    std::sort(terms.begin(), terms.end());
    double raw = 0.0;
    for (double t : terms) raw += t;
    s.raw.push_back(raw);
    s.normalized.push_back(raw / static_cast<double>(entries.size()));
  }
  return aggregate_score(s, {AggregateRule::Mode::MeanOverLayers, 0});
}

std::string generate_with_budget(ActivationBackend& backend, const std::string& system_prompt,
                                 const std::string& query, std::vector<std::string> docs,
                                 int max_tokens) {
  while (true) {
    try {
      return backend.generate(system_prompt, query, docs, max_tokens);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::OverLength || docs.empty()) throw;
      docs.pop_back();
    }
  }
}

}  // namespace

uint64_t ExperimentSpec::config_hash() const { return fnv1a64(spec_signature(*this)); }

ExperimentSpec ExperimentSpec::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::SpecInvalid, "cannot open experiment spec " + path);
  json root;
  try {
    in >> root;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SpecInvalid, std::string("spec parse error: ") + e.what());
  }
  const json j = root.contains("experiment") ? root["experiment"] : root;

  ExperimentSpec s;
  try {
    if (j.contains("risks")) {
      s.risks.clear();
      for (const auto& r : j["risks"]) s.risks.push_back(risk_from_name(r.get<std::string>()));
    }
    s.queries_per_role = j.value("queries_per_role", s.queries_per_role);
    s.docs_per_role = j.value("docs_per_role", s.docs_per_role);
    s.corpus_seed = j.value("corpus_seed", s.corpus_seed);
    s.attack_seed = j.value("attack_seed", s.attack_seed);
    s.anchor_seed = j.value("anchor_seed", s.anchor_seed);
    s.shuffle_seed = j.value("shuffle_seed", s.shuffle_seed);
    s.pronet_seed = j.value("pronet_seed", s.pronet_seed);
    if (j.contains("anchor_counts")) {
      s.anchor_counts = j["anchor_counts"].get<std::vector<size_t>>();
    }
    if (j.contains("layer_sets")) {
      s.layer_sets = j["layer_sets"].get<std::vector<std::vector<int>>>();
    }
    s.eval_benign = j.value("eval_benign", s.eval_benign);
    s.eval_attack = j.value("eval_attack", s.eval_attack);
    s.percentile = j.value("percentile", s.percentile);
    s.null_shuffles = j.value("null_shuffles", s.null_shuffles);
    s.client_role = j.value("client_role", s.client_role);
    s.unauthorized_target = j.value("unauthorized_target", s.unauthorized_target);
    s.hijack_topic = j.value("hijack_topic", s.hijack_topic);
    s.pooling = pooling_from_name(j.value("pooling", "mean"));
    s.pronet_rank = j.value("pronet_rank", s.pronet_rank);
    s.pronet_layer = j.value("pronet_layer", s.pronet_layer);
    if (j.contains("pronet_layer_set")) {
      s.pronet_layer_set = j["pronet_layer_set"].get<std::vector<int>>();
    }
    s.epsilon = j.value("epsilon", s.epsilon);
    s.alpha = j.value("alpha", s.alpha);
    s.train_steps = j.value("train_steps", s.train_steps);
    s.train_lr = j.value("train_lr", s.train_lr);
    s.train_batch = j.value("train_batch", s.train_batch);
    s.harmless_queries = j.value("harmless_queries", s.harmless_queries);
    s.adaptive_n = j.value("adaptive_n", s.adaptive_n);
    s.out_dir = j.value("out_dir", s.out_dir);
    if (root.contains("backend")) {
      const json& b = root["backend"];
      s.backend.layers = b.value("layers", s.backend.layers);
      s.backend.width = b.value("width", s.backend.width);
      s.backend.heads = b.value("heads", s.backend.heads);
      s.backend.context = b.value("context", s.backend.context);
      s.backend.seed = b.value("seed", s.backend.seed);
      s.pretrain_backend = b.value("pretrain", s.pretrain_backend);
      s.pretrain.steps = b.value("pretrain_steps", s.pretrain.steps);
      s.pretrain.batch = b.value("pretrain_batch", s.pretrain.batch);
      s.pretrain.learning_rate = b.value("pretrain_lr", s.pretrain.learning_rate);
      s.weights_file = b.value("weights_file", s.weights_file);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SpecInvalid, std::string("spec field error: ") + e.what());
  }
  if (s.eval_benign == 0 || s.eval_attack == 0 || s.anchor_counts.empty() ||
      s.layer_sets.empty() || s.risks.empty()) {
    throw Error(ErrorCode::SpecInvalid, "experiment spec needs risks, eval sizes, counts, layers");
  }
  return s;
}

std::shared_ptr<ToyLm> build_backend(const ExperimentSpec& spec) {
  if (!spec.weights_file.empty() && std::ifstream(spec.weights_file).good()) {
    return std::make_shared<ToyLm>(ToyLm::load_file(spec.weights_file));
  }
  if (!spec.pretrain_backend) {
    return std::make_shared<ToyLm>(spec.backend);
  }
  const SyntheticCorpus corpus =
      build_synthetic_corpus(spec.queries_per_role, spec.docs_per_role, spec.corpus_seed);
  std::vector<std::string> pool;
  for (const auto& role : corpus.roles) {
    const auto& qs = corpus.queries.at(role);
    pool.insert(pool.end(), qs.begin(), qs.end());
    for (const auto& d : corpus.documents.at(role)) pool.push_back(d.text);
  }
  auto lm = std::make_shared<ToyLm>(ToyLm::pretrained(spec.backend, pool, spec.pretrain));
  if (!spec.weights_file.empty()) lm->save_file(spec.weights_file);
  return lm;
}

BenchContext build_bench_context(const ExperimentSpec& spec) {
  BenchContext ctx;
  ctx.corpus = build_synthetic_corpus(spec.queries_per_role, spec.docs_per_role, spec.corpus_seed);

  const auto& client_q = ctx.corpus.role_queries(spec.client_role);
  const auto client_docs = ctx.corpus.role_document_texts(spec.client_role);
  const size_t max_anchors =
      *std::max_element(spec.anchor_counts.begin(), spec.anchor_counts.end());
  if (client_q.size() < max_anchors + spec.eval_benign ||
      client_docs.size() < max_anchors + spec.eval_benign) {
    throw Error(ErrorCode::SpecInvalid, "client pools are too small for the requested sweep");
  }
  ctx.anchor_query_pool.assign(client_q.begin(), client_q.begin() + max_anchors);
  ctx.anchor_doc_pool.assign(client_docs.begin(), client_docs.begin() + max_anchors);
  const std::vector<std::string> eval_q(client_q.begin() + max_anchors,
                                        client_q.begin() + max_anchors + spec.eval_benign);
  const std::vector<std::string> eval_d(client_docs.begin() + max_anchors,
                                        client_docs.begin() + max_anchors + spec.eval_benign);

  for (Risk risk : spec.risks) {
    RiskSuite suite;
    suite.risk = risk;
    switch (risk) {
      case Risk::Reconnaissance: {
        suite.kind = AnchorKind::Query;
        suite.benign = eval_q;
        for (const auto& s : gen_reconnaissance(spec.eval_attack, spec.attack_seed)) {
          suite.attacks.push_back(s.query);
        }
        break;
      }
      case Risk::Exfiltration: {
        suite.kind = AnchorKind::Query;
        suite.benign = eval_q;
        for (const auto& s : gen_exfiltration(spec.eval_attack, spec.attack_seed + 1)) {
          suite.attacks.push_back(s.query);
        }
        break;
      }
      case Risk::Unauthorized: {
        suite.kind = AnchorKind::Query;
        suite.benign = eval_q;
        const auto& target_docs = ctx.corpus.documents.at(spec.unauthorized_target);
        for (const auto& s : gen_unauthorized(spec.client_role, spec.unauthorized_target,
                                              target_docs, spec.eval_attack,
                                              spec.attack_seed + 2)) {
          suite.attacks.push_back(s.query);
        }
        break;
      }
      case Risk::Poisoning: {
        suite.kind = AnchorKind::Document;
        suite.benign = eval_d;
        for (const auto& s : gen_poisoned_docs(client_q, misinformation_bank(), spec.eval_attack,
                                               spec.attack_seed + 3, spec.client_role)) {
          suite.attacks.push_back(s.document.text);
        }
        break;
      }
      case Risk::Hijacking: {
        suite.kind = AnchorKind::Document;
        suite.benign = eval_d;
        for (const auto& s : gen_hijack_docs(client_q, spec.hijack_topic, spec.eval_attack,
                                             spec.attack_seed + 4, spec.client_role)) {
          suite.attacks.push_back(s.document.text);
        }
        break;
      }
    }
    ctx.suites.push_back(std::move(suite));
  }
  return ctx;
}

DetectionReport run_detection_bench(const ExperimentSpec& spec, ActivationBackend& backend) {
  const BenchContext ctx = build_bench_context(spec);
  DetectionReport report;

  for (const std::vector<int>& layer_set : spec.layer_sets) {
    const size_t max_anchors =
        *std::max_element(spec.anchor_counts.begin(), spec.anchor_counts.end());
    const AnchorSet full_anchors =
        extract_anchors(backend, spec.client_role, ctx.anchor_query_pool, ctx.anchor_doc_pool,
                        max_anchors, layer_set, spec.anchor_seed, spec.pooling);

    // embed every suite text once per layer set; benign negatives are shared
    // per anchor kind, so they embed once
    std::vector<EmbeddedSuite> embedded;
    std::map<AnchorKind, std::vector<std::vector<std::vector<double>>>> benign_cache;
    for (const RiskSuite& suite : ctx.suites) {
      EmbeddedSuite e;
      e.risk = suite.risk;
      e.kind = suite.kind;
      auto& cached = benign_cache[suite.kind];
      if (cached.empty()) {
        for (const auto& text : suite.benign) {
          cached.push_back(embed_text(backend, text, layer_set, spec.pooling));
        }
      }
      e.benign = cached;
      for (const auto& text : suite.attacks) {
        e.attacks.push_back(embed_text(backend, text, layer_set, spec.pooling));
      }
      embedded.push_back(std::move(e));
    }

    for (size_t count : spec.anchor_counts) {
      const AnchorSet anchors = anchor_prefix(full_anchors, count, count);
      const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};
      for (const EmbeddedSuite& suite : embedded) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& pooled : suite.benign) {
          scores.push_back(layer_mean_asi(pooled, anchors, suite.kind));
          labels.push_back(0);
        }
        for (const auto& pooled : suite.attacks) {
          scores.push_back(layer_mean_asi(pooled, anchors, suite.kind));
          labels.push_back(1);
        }

        DetectionCell cell;
        cell.risk = risk_name(suite.risk);
        cell.anchor_count = count;
        cell.layers = layers_tag(layer_set);
        cell.auroc = auroc(scores, labels);
        cell.tau = calibrate_threshold(anchors, spec.percentile, rule, suite.kind);

        ConfusionCounts confusion;
        for (size_t i = 0; i < scores.size(); ++i) {
          const bool flagged = scores[i] > cell.tau;
          if (labels[i] == 1) {
            (flagged ? confusion.tp : confusion.fn)++;
          } else {
            (flagged ? confusion.fp : confusion.tn)++;
          }
        }
        cell.macc = macc(confusion);

        // permutation-null control: label shuffles should sit near 0.5
        const uint64_t cell_seed =
            spec.shuffle_seed ^ fnv1a64(cell.risk + ":" + std::to_string(count) + ":" + cell.layers);
        Rng shuffle_rng(cell_seed);
        double null_sum = 0.0;
        double null_min = 1.0, null_max = 0.0;
        for (size_t s = 0; s < spec.null_shuffles; ++s) {
          std::vector<int> shuffled = labels;
          for (size_t i = shuffled.size(); i > 1; --i) {
            std::swap(shuffled[i - 1], shuffled[shuffle_rng.below(i)]);
          }
          const double null_auc = auroc(scores, shuffled);
          null_sum += null_auc;
          null_min = std::min(null_min, null_auc);
          null_max = std::max(null_max, null_auc);
        }
        if (spec.null_shuffles == 0) {
          cell.null_auroc_mean = 0.5;
        } else {
          cell.null_auroc_mean = null_sum / static_cast<double>(spec.null_shuffles);
          cell.null_min = null_min;
          cell.null_max = null_max;
        }
        report.cells.push_back(std::move(cell));
      }
    }
  }

  std::sort(report.cells.begin(), report.cells.end(),
            [](const DetectionCell& a, const DetectionCell& b) {
              return std::tie(a.risk, a.anchor_count, a.layers) <
                     std::tie(b.risk, b.anchor_count, b.layers);
            });

  std::ostringstream csv;
  csv << csv_preamble(spec);
  csv << "risk,anchor_count,layers,auroc,macc,tau,null_auroc_mean\n";
  csv.precision(17);
  for (const DetectionCell& c : report.cells) {
    csv << c.risk << ',' << c.anchor_count << ',' << c.layers << ',' << c.auroc << ',' << c.macc
        << ',' << c.tau << ',' << c.null_auroc_mean << '\n';
  }
  report.csv = csv.str();
  return report;
}

HarmlessnessReport run_harmlessness(const ExperimentSpec& spec, ActivationBackend& backend,
                                    const ProNetParams& params) {
  const BenchContext ctx = build_bench_context(spec);
  VectorStore store;
  store.ingest(ctx.corpus.documents.at(spec.client_role));

  const auto& client_q = ctx.corpus.role_queries(spec.client_role);
  const size_t max_anchors =
      *std::max_element(spec.anchor_counts.begin(), spec.anchor_counts.end());
  const size_t n = std::min(spec.harmless_queries, client_q.size() - max_anchors);
  std::vector<std::string> queries(client_q.begin() + max_anchors,
                                   client_q.begin() + max_anchors + n);

  const std::string system_prompt = "You are a helpful assistant for the organization.";
  auto generate_all = [&]() {
    std::vector<std::string> out;
    for (const auto& q : queries) {
      std::vector<std::string> docs;
      for (const auto& hit : store.retrieve(q, 4)) docs.push_back(hit.doc.text);
      out.push_back(generate_with_budget(backend, system_prompt, q, std::move(docs), 24));
    }
    return out;
  };

  const std::vector<std::string> baseline = generate_all();
  std::vector<std::string> steered;
  {
    const ScopedInjection inj = apply(backend, params);
    steered = generate_all();
  }

  HarmlessnessReport r;
  r.precision_self = bertscore_precision(baseline, baseline);
  r.recall_self = r.precision_self;
  r.f1_self = r.precision_self;
  r.precision = bertscore_precision(steered, baseline);
  r.recall = bertscore_precision(baseline, steered);
  r.f1 = (r.precision + r.recall) == 0.0
             ? 0.0
             : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  r.delta_precision = r.precision - r.precision_self;
  r.delta_recall = r.recall - r.recall_self;
  r.delta_f1 = r.f1 - r.f1_self;

  std::ostringstream csv;
  csv << csv_preamble(spec);
  csv << "metric,original,firewall,change\n";
  csv.precision(17);
  csv << "precision," << r.precision_self << ',' << r.precision << ',' << r.delta_precision << '\n';
  csv << "recall," << r.recall_self << ',' << r.recall << ',' << r.delta_recall << '\n';
  csv << "f1," << r.f1_self << ',' << r.f1 << ',' << r.delta_f1 << '\n';
  r.csv = csv.str();
  return r;
}

AdaptiveReport run_adaptive(const ExperimentSpec& spec, ActivationBackend& backend) {
  const BenchContext ctx = build_bench_context(spec);
  const std::vector<int>& layer_set = spec.layer_sets.front();
  const size_t max_anchors =
      *std::max_element(spec.anchor_counts.begin(), spec.anchor_counts.end());
  const AnchorSet anchors =
      extract_anchors(backend, spec.client_role, ctx.anchor_query_pool, ctx.anchor_doc_pool,
                      max_anchors, layer_set, spec.anchor_seed, spec.pooling);

  AdaptiveReport report;
  for (const RiskSuite& suite : ctx.suites) {
    std::vector<double> scores;
    std::vector<double> perturbed_scores;
    std::vector<int> labels;
    for (const auto& text : suite.benign) {
      const double s =
          layer_mean_asi(embed_text(backend, text, layer_set, spec.pooling), anchors, suite.kind);
      scores.push_back(s);
      perturbed_scores.push_back(s);
      labels.push_back(0);
    }
    size_t index = 0;
    for (const auto& text : suite.attacks) {
      scores.push_back(layer_mean_asi(embed_text(backend, text, layer_set, spec.pooling), anchors,
                                      suite.kind));
      const std::string perturbed =
          synonym_perturb(text, spec.adaptive_n, spec.attack_seed + 1000 + index);
      perturbed_scores.push_back(layer_mean_asi(
          embed_text(backend, perturbed, layer_set, spec.pooling), anchors, suite.kind));
      labels.push_back(1);
      ++index;
    }
    AdaptiveCell cell;
    cell.risk = risk_name(suite.risk);
    cell.auroc_original = auroc(scores, labels);
    cell.auroc_perturbed = auroc(perturbed_scores, labels);
    cell.delta = cell.auroc_perturbed - cell.auroc_original;
    report.cells.push_back(std::move(cell));
  }
  std::sort(report.cells.begin(), report.cells.end(),
            [](const AdaptiveCell& a, const AdaptiveCell& b) { return a.risk < b.risk; });

  std::ostringstream csv;
  csv << csv_preamble(spec);
  csv << "risk,n,auroc_original,auroc_perturbed,delta\n";
  csv.precision(17);
  for (const AdaptiveCell& c : report.cells) {
    csv << c.risk << ',' << spec.adaptive_n << ',' << c.auroc_original << ',' << c.auroc_perturbed
        << ',' << c.delta << '\n';
  }
  report.csv = csv.str();
  return report;
}

std::string export_activation_diffs(const ExperimentSpec& spec, ActivationBackend& backend) {
  const BenchContext ctx = build_bench_context(spec);
  const std::vector<int>& layer_set = spec.layer_sets.front();
  const size_t max_anchors =
      *std::max_element(spec.anchor_counts.begin(), spec.anchor_counts.end());
  const AnchorSet anchors =
      extract_anchors(backend, spec.client_role, ctx.anchor_query_pool, ctx.anchor_doc_pool,
                      max_anchors, layer_set, spec.anchor_seed, spec.pooling);

  std::ostringstream csv;
  csv << csv_preamble(spec);
  csv << "id,label,risk";
  for (int layer : layer_set) csv << ",asi_l" << layer;
  csv << ",nearest_anchor";
  const size_t width = anchors.width;
  for (size_t i = 0; i < width; ++i) csv << ",diff_" << i;
  csv << "\n";
  csv.precision(17);

  auto emit = [&](const std::string& id, const char* label, const char* risk,
                  const std::vector<std::vector<double>>& pooled, AnchorKind kind) {
    const auto& entries = kind == AnchorKind::Query ? anchors.query_anchors : anchors.doc_anchors;
    csv << id << ',' << label << ',' << risk;
    for (size_t li = 0; li < layer_set.size(); ++li) {
      double raw = 0.0;
      std::vector<double> terms(entries.size());
      for (size_t j = 0; j < entries.size(); ++j) {
        terms[j] = squared_distance(pooled[li], entries[j].activations[li]);
      }
      std::sort(terms.begin(), terms.end());
      for (double t : terms) raw += t;
      csv << ',' << raw / static_cast<double>(entries.size());
    }
    // nearest anchor at the first configured layer, lowest index on ties
    size_t nearest = 0;
    double best = squared_distance(pooled[0], entries[0].activations[0]);
    for (size_t j = 1; j < entries.size(); ++j) {
      const double d = squared_distance(pooled[0], entries[j].activations[0]);
      if (d < best) {
        best = d;
        nearest = j;
      }
    }
    csv << ',' << nearest;
    const std::vector<double>& anchor_vec = entries[nearest].activations[0];
    for (size_t i = 0; i < width; ++i) csv << ',' << pooled[0][i] - anchor_vec[i];
    csv << '\n';
  };

  for (const RiskSuite& suite : ctx.suites) {
    const char* risk = risk_name(suite.risk);
    for (size_t i = 0; i < suite.benign.size(); ++i) {
      emit("benign-" + std::string(risk) + "-" + std::to_string(i), "benign", risk,
           embed_text(backend, suite.benign[i], layer_set, spec.pooling), suite.kind);
    }
    for (size_t i = 0; i < suite.attacks.size(); ++i) {
      emit("attack-" + std::string(risk) + "-" + std::to_string(i), "attack", risk,
           embed_text(backend, suite.attacks[i], layer_set, spec.pooling), suite.kind);
    }
  }
  return csv.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << content;
}

}  // namespace ragfire
