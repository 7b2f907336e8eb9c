#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>

#include "CLI11.hpp"

#include "ragfire/anchors_io.hpp"
#include "ragfire/bench.hpp"
#include "ragfire/gateway.hpp"

using namespace ragfire;

namespace {

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop.store(true); }

std::string resolve_config(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  const char* env = std::getenv("RAGFIRE_CONFIG");
  if (env != nullptr && env[0] != '\0') return env;
  return "";
}

ExperimentSpec load_spec(const std::string& config_path, uint64_t seed_override, bool has_seed) {
  ExperimentSpec spec;
  if (!config_path.empty()) spec = ExperimentSpec::from_json_file(config_path);
  if (has_seed) {
    spec.attack_seed = seed_override;
    spec.anchor_seed = seed_override + 1;
    spec.shuffle_seed = seed_override + 2;
    spec.pronet_seed = seed_override + 3;
  }
  return spec;
}

std::string out_path(const ExperimentSpec& spec, const std::string& name) {
  std::filesystem::create_directories(spec.out_dir);
  return (std::filesystem::path(spec.out_dir) / name).string();
}

// Anchors for one role of the bundled corpus, split as in the bench: the
// leading slice of each role's pool is anchor territory.
AnchorSet role_anchors(const ExperimentSpec& spec, ActivationBackend& backend,
                       const std::string& role, size_t count) {
  const SyntheticCorpus corpus =
      build_synthetic_corpus(spec.queries_per_role, spec.docs_per_role, spec.corpus_seed);
  const auto& queries = corpus.role_queries(role);
  const auto docs = corpus.role_document_texts(role);
  return extract_anchors(backend, role, queries, docs, count, spec.layer_sets.front(),
                         spec.anchor_seed, spec.pooling);
}

int run_bench_check(const DetectionReport& report, const ExperimentSpec& spec) {
  const size_t max_anchors =
      *std::max_element(spec.anchor_counts.begin(), spec.anchor_counts.end());
  bool ok = true;
  for (const DetectionCell& c : report.cells) {
    if (c.anchor_count != max_anchors) continue;
    if (c.auroc < 0.95) {
      std::cerr << "check failed: " << c.risk << " auroc " << c.auroc << " < 0.95\n";
      ok = false;
    }
    if (c.null_auroc_mean < 0.4 || c.null_auroc_mean > 0.6) {
      std::cerr << "check failed: " << c.risk << " null auroc mean " << c.null_auroc_mean << "\n";
      ok = false;
    }
  }
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ragfire - activation-shift firewall for RAG pipelines"};
  app.require_subcommand(1);

  std::string config_flag;
  uint64_t seed_flag = 0;
  bool seed_given = false;
  app.add_option("--config", config_flag, "config file (or RAGFIRE_CONFIG)")->envname("");
  app.add_option("--seed", seed_flag, "override the experiment seeds")
      ->each([&seed_given](const std::string&) { seed_given = true; });

  // ingest
  auto* ingest_cmd = app.add_subcommand("ingest", "screen a corpus file through the firewall");
  std::string ingest_corpus, accepted_out, quarantine_out;
  ingest_cmd->add_option("--corpus", ingest_corpus, "corpus file to screen")->required();
  ingest_cmd->add_option("--accepted-out", accepted_out, "write accepted docs here");
  ingest_cmd->add_option("--quarantine-out", quarantine_out, "write quarantined docs here");

  // anchors
  auto* anchors_cmd = app.add_subcommand("anchors", "build an anchor file for a role");
  std::string anchors_role = "medical", anchors_out = "anchors.rfaz";
  size_t anchors_count = 200;
  anchors_cmd->add_option("--role", anchors_role, "client role");
  anchors_cmd->add_option("--count", anchors_count, "anchor sample count");
  anchors_cmd->add_option("--out", anchors_out, "output .rfaz path");

  // calibrate
  auto* calibrate_cmd = app.add_subcommand("calibrate", "leave-one-out threshold from anchors");
  std::string calibrate_anchors;
  double calibrate_pct = 99.0;
  std::string calibrate_kind = "query";
  calibrate_cmd->add_option("--anchors", calibrate_anchors, "anchor file")->required();
  calibrate_cmd->add_option("--percentile", calibrate_pct, "nearest-rank percentile");
  calibrate_cmd->add_option("--kind", calibrate_kind, "query or document");

  // fit-classifier
  auto* fit_cmd = app.add_subcommand("fit-classifier", "fit the risk decision tree");
  std::string fit_out = "classifier.txt";
  fit_cmd->add_option("--out", fit_out, "output tree file");

  // train-pronet
  auto* train_cmd = app.add_subcommand("train-pronet", "train a per-role correction network");
  std::string train_role = "medical", train_out = "pronet.rfpn", train_report = "training.csv";
  train_cmd->add_option("--role", train_role, "client role");
  train_cmd->add_option("--out", train_out, "output .rfpn path");
  train_cmd->add_option("--report", train_report, "per-step loss CSV");

  // detect
  auto* detect_cmd = app.add_subcommand("detect", "score queries against a role's anchors");
  std::string detect_role = "medical", detect_query, detect_file;
  detect_cmd->add_option("--role", detect_role, "client role");
  detect_cmd->add_option("--query", detect_query, "single query text");
  detect_cmd->add_option("--file", detect_file, "file with one query per line");

  // bench / adaptive / harmless / export-diffs
  auto* bench_cmd = app.add_subcommand("bench", "detection sweep over anchors and layers");
  bool bench_check = false;
  bench_cmd->add_flag("--check", bench_check, "exit 3 when acceptance floors fail");
  auto* adaptive_cmd = app.add_subcommand("adaptive", "synonym-replacement robustness report");
  auto* harmless_cmd = app.add_subcommand("harmless", "generation-quality deltas under ProNet");
  std::string harmless_pronet;
  harmless_cmd->add_option("--pronet", harmless_pronet, "trained .rfpn (default: train now)");
  auto* export_cmd = app.add_subcommand("export-diffs", "per-sample activation differences");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "run the JSON-over-HTTP gateway");

  CLI11_PARSE(app, argc, argv);

  const std::string config_path = resolve_config(config_flag);
  try {
    if (ingest_cmd->parsed() || serve_cmd->parsed()) {
      if (config_path.empty()) {
        std::cerr << "a firewall config is required (--config or RAGFIRE_CONFIG)\n";
        return 2;
      }
      Firewall firewall = Firewall::from_config(FirewallConfig::from_json_file(config_path));
      if (ingest_cmd->parsed()) {
        const auto docs = load_corpus_file(ingest_corpus);
        const auto outcomes = firewall.handle_ingest("cli", docs);
        std::vector<Document> accepted, quarantined;
        for (size_t i = 0; i < outcomes.size(); ++i) {
          std::cout << outcomes[i].id << '\t'
                    << (outcomes[i].accepted ? "accepted" : "quarantined") << '\n';
          (outcomes[i].accepted ? accepted : quarantined).push_back(docs[i]);
        }
        if (!accepted_out.empty()) save_corpus_file(accepted_out, accepted);
        if (!quarantine_out.empty()) save_corpus_file(quarantine_out, quarantined);
        return 0;
      }
      GatewayServer server(firewall);
      std::signal(SIGINT, handle_signal);
      std::signal(SIGTERM, handle_signal);
      server.start(firewall.config().host, firewall.config().port);
      std::cout << "listening on " << firewall.config().host << ":" << server.port() << "\n";
      while (!g_stop.load()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
      }
      server.stop();
      return 0;
    }

    ExperimentSpec spec = load_spec(config_path, seed_flag, seed_given);
    auto backend = build_backend(spec);

    if (anchors_cmd->parsed()) {
      const AnchorSet anchors = role_anchors(spec, *backend, anchors_role, anchors_count);
      save_anchors_file(anchors, anchors_out);
      std::cout << "wrote " << anchors.query_anchors.size() << " query / "
                << anchors.doc_anchors.size() << " doc anchors to " << anchors_out << "\n";
      return 0;
    }
    if (calibrate_cmd->parsed()) {
      const AnchorSet anchors = load_anchors_file(calibrate_anchors);
      const AnchorKind kind =
          calibrate_kind == "document" ? AnchorKind::Document : AnchorKind::Query;
      const double tau = calibrate_threshold(anchors, calibrate_pct,
                                             {AggregateRule::Mode::MeanOverLayers, 0}, kind);
      std::cout.precision(17);
      std::cout << tau << "\n";
      return 0;
    }
    if (fit_cmd->parsed()) {
      const BenchContext ctx = build_bench_context(spec);
      const size_t max_anchors =
          *std::max_element(spec.anchor_counts.begin(), spec.anchor_counts.end());
      const AnchorSet anchors =
          extract_anchors(*backend, spec.client_role, ctx.anchor_query_pool, ctx.anchor_doc_pool,
                          max_anchors, spec.layer_sets.front(), spec.anchor_seed, spec.pooling);
      std::vector<std::vector<double>> features;
      std::vector<std::string> labels;
      for (const RiskSuite& suite : ctx.suites) {
        for (const auto& text : suite.benign) {
          features.push_back(score_text(*backend, text, anchors, suite.kind).feature_vector());
          labels.emplace_back(kBenignLabel);
        }
        for (const auto& text : suite.attacks) {
          features.push_back(score_text(*backend, text, anchors, suite.kind).feature_vector());
          labels.emplace_back(risk_name(suite.risk));
        }
      }
      const DecisionTree tree = fit_classifier(features, labels);
      tree.save_file(fit_out);
      size_t hits = 0;
      for (size_t i = 0; i < labels.size(); ++i) {
        hits += tree.training_predictions[i] == labels[i] ? 1 : 0;
      }
      std::cout << "training accuracy " << static_cast<double>(hits) / labels.size() << ", tree in "
                << fit_out << "\n";
      return 0;
    }
    if (train_cmd->parsed()) {
      const BenchContext ctx = build_bench_context(spec);
      const AnchorSet anchors = role_anchors(spec, *backend, train_role, 50);
      std::vector<std::string> flagged;
      for (const auto& s : gen_reconnaissance(spec.train_batch, spec.attack_seed)) {
        flagged.push_back(s.query);
      }
      const auto& benign_pool = ctx.corpus.role_queries(train_role);
      std::vector<std::string> benign(benign_pool.begin(),
                                      benign_pool.begin() + spec.train_batch);
      ProNetParams params = init_pronet(train_role, spec.pronet_layer, backend->width(),
                                        spec.pronet_rank, spec.epsilon, spec.alpha,
                                        spec.pronet_seed);
      TrainingOptions opts;
      opts.steps = spec.train_steps;
      opts.learning_rate = spec.train_lr;
      opts.seed = spec.pronet_seed;
      const auto [trained, report] =
          train(*backend, params, benign, flagged, anchors, spec.pronet_layer_set, opts);
      save_pronet_file(trained, train_out);
      report.save_csv_file(train_report);
      std::cout << "L " << report.initial.combined << " -> " << report.final_loss.combined
                << ", params in " << train_out << ", report in " << train_report << "\n";
      return 0;
    }
    if (detect_cmd->parsed()) {
      std::vector<std::string> queries;
      if (!detect_query.empty()) queries.push_back(detect_query);
      if (!detect_file.empty()) {
        std::ifstream in(detect_file);
        if (!in) throw Error(ErrorCode::IoError, "cannot open " + detect_file);
        std::string line;
        while (std::getline(in, line)) {
          if (!line.empty()) queries.push_back(line);
        }
      }
      if (queries.empty()) {
        std::cerr << "need --query or --file\n";
        return 2;
      }
      const AnchorSet anchors = role_anchors(spec, *backend, detect_role, 200);
      const AggregateRule rule{AggregateRule::Mode::MeanOverLayers, 0};
      const double tau = calibrate_threshold(anchors, spec.percentile, rule);
      std::cout.precision(6);
      for (const auto& q : queries) {
        const AsiScore score = score_text(*backend, q, anchors, AnchorKind::Query);
        const RiskVerdict v = match(score, tau, rule);
        std::cout << (v.decision == Decision::Accept ? "accept" : "reject") << '\t'
                  << aggregate_score(score, rule) << '\t' << tau << '\t' << q << '\n';
      }
      return 0;
    }
    if (bench_cmd->parsed()) {
      const DetectionReport report = run_detection_bench(spec, *backend);
      const std::string path = out_path(spec, "detection.csv");
      write_text_file(path, report.csv);
      std::cout << "wrote " << report.cells.size() << " cells to " << path << "\n";
      if (bench_check) return run_bench_check(report, spec);
      return 0;
    }
    if (adaptive_cmd->parsed()) {
      const AdaptiveReport report = run_adaptive(spec, *backend);
      const std::string path = out_path(spec, "adaptive.csv");
      write_text_file(path, report.csv);
      std::cout << "wrote " << report.cells.size() << " rows to " << path << "\n";
      return 0;
    }
    if (harmless_cmd->parsed()) {
      ProNetParams params;
      if (!harmless_pronet.empty()) {
        params = load_pronet_file(harmless_pronet);
      } else {
        const BenchContext ctx = build_bench_context(spec);
        const AnchorSet anchors = role_anchors(spec, *backend, spec.client_role, 50);
        std::vector<std::string> flagged;
        for (const auto& s : gen_reconnaissance(spec.train_batch, spec.attack_seed)) {
          flagged.push_back(s.query);
        }
        const auto& pool = ctx.corpus.role_queries(spec.client_role);
        std::vector<std::string> benign(pool.begin(), pool.begin() + spec.train_batch);
        ProNetParams init = init_pronet(spec.client_role, spec.pronet_layer, backend->width(),
                                        spec.pronet_rank, spec.epsilon, spec.alpha,
                                        spec.pronet_seed);
        TrainingOptions opts;
        opts.steps = spec.train_steps;
        opts.learning_rate = spec.train_lr;
        opts.seed = spec.pronet_seed;
        params = train(*backend, init, benign, flagged, anchors, spec.pronet_layer_set, opts).first;
      }
      const HarmlessnessReport report = run_harmlessness(spec, *backend, params);
      const std::string path = out_path(spec, "harmlessness.csv");
      write_text_file(path, report.csv);
      std::cout << "deltas: precision " << report.delta_precision << ", recall "
                << report.delta_recall << ", f1 " << report.delta_f1 << " -> " << path << "\n";
      return 0;
    }
    if (export_cmd->parsed()) {
      const std::string csv = export_activation_diffs(spec, *backend);
      const std::string path = out_path(spec, "activation_diffs.csv");
      write_text_file(path, csv);
      std::cout << "wrote " << path << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
