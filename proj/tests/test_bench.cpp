#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ragfire/bench.hpp"

using namespace ragfire;

namespace {

ExperimentSpec tiny_spec() {
  ExperimentSpec s;
  s.queries_per_role = 60;
  s.docs_per_role = 60;
  s.anchor_counts = {8, 16};
  s.layer_sets = {{0, 1}};
  s.eval_benign = 20;
  s.eval_attack = 20;
  s.null_shuffles = 5;
  s.harmless_queries = 6;
  s.pretrain_backend = false;
  s.backend.layers = 2;
  s.backend.width = 16;
  s.backend.heads = 2;
  s.backend.context = 224;
  s.backend.seed = 13;
  return s;
}

}  // namespace

TEST_CASE("detection bench is deterministic and fully populated") {
  const ExperimentSpec spec = tiny_spec();
  auto backend = build_backend(spec);
  const DetectionReport a = run_detection_bench(spec, *backend);
  const DetectionReport b = run_detection_bench(spec, *backend);

  CHECK(a.csv == b.csv);  // byte-identical rerun
  CHECK(a.cells.size() == 5 * 2);
  for (const DetectionCell& c : a.cells) {
    CHECK(c.auroc >= 0.0);
    CHECK(c.auroc <= 1.0);
    CHECK(c.macc >= 0.0);
    CHECK(c.macc <= 1.0);
    CHECK(c.tau >= 0.0);
  }
  CHECK(a.csv.find("# config_hash=") != std::string::npos);
  CHECK(a.csv.find("# seeds corpus=") != std::string::npos);
  CHECK(a.csv.find("risk,anchor_count,layers,auroc,macc,tau,null_auroc_mean") !=
        std::string::npos);

  // rows are sorted by (risk, anchor_count, layers)
  for (size_t i = 1; i < a.cells.size(); ++i) {
    const auto& prev = a.cells[i - 1];
    const auto& cur = a.cells[i];
    CHECK(std::tie(prev.risk, prev.anchor_count) <= std::tie(cur.risk, cur.anchor_count));
  }
}

TEST_CASE("adaptive report with N=0 has exactly zero deltas") {
  ExperimentSpec spec = tiny_spec();
  spec.adaptive_n = 0;
  auto backend = build_backend(spec);
  const AdaptiveReport report = run_adaptive(spec, *backend);
  CHECK(report.cells.size() == 5);
  for (const AdaptiveCell& c : report.cells) {
    CHECK(c.delta == 0.0);
    CHECK(c.auroc_original == c.auroc_perturbed);
  }
}

TEST_CASE("adaptive report is deterministic under a fixed seed") {
  ExperimentSpec spec = tiny_spec();
  spec.adaptive_n = 5;
  auto backend = build_backend(spec);
  const AdaptiveReport a = run_adaptive(spec, *backend);
  const AdaptiveReport b = run_adaptive(spec, *backend);
  CHECK(a.csv == b.csv);
}

TEST_CASE("harmlessness deltas are exactly zero for neutral ProNets") {
  const ExperimentSpec spec = tiny_spec();
  auto backend = build_backend(spec);

  SUBCASE("zero-initialized params, nonzero epsilon") {
    const ProNetParams p = init_pronet("medical", 0, spec.backend.width, 4, 2.0, 1.0, 3);
    const HarmlessnessReport r = run_harmlessness(spec, *backend, p);
    CHECK(r.delta_precision == 0.0);
    CHECK(r.delta_recall == 0.0);
    CHECK(r.delta_f1 == 0.0);
  }

  SUBCASE("trained-looking params, zero epsilon") {
    ProNetParams p = init_pronet("medical", 0, spec.backend.width, 4, 0.0, 1.0, 3);
    Rng rng(9);
    for (double& v : p.b) v = rng.gaussian();
    const HarmlessnessReport r = run_harmlessness(spec, *backend, p);
    CHECK(r.delta_precision == 0.0);
    CHECK(r.delta_recall == 0.0);
    CHECK(r.delta_f1 == 0.0);
  }
}

TEST_CASE("activation-diff export has one row per sample and a documented header") {
  const ExperimentSpec spec = tiny_spec();
  auto backend = build_backend(spec);
  const std::string csv = export_activation_diffs(spec, *backend);

  std::istringstream in(csv);
  std::string line;
  size_t preamble = 0, rows = 0;
  std::string header;
  while (std::getline(in, line)) {
    if (line.rfind("#", 0) == 0) {
      ++preamble;
    } else if (header.empty()) {
      header = line;
    } else {
      ++rows;
    }
  }
  CHECK(preamble == 2);
  CHECK(header.rfind("id,label,risk,asi_l0,asi_l1,nearest_anchor,diff_0", 0) == 0);
  CHECK(rows == 5 * (spec.eval_benign + spec.eval_attack));
}

TEST_CASE("nearest anchor in the export equals a brute-force scan") {
  const ExperimentSpec spec = tiny_spec();
  auto backend = build_backend(spec);
  const std::string csv = export_activation_diffs(spec, *backend);

  // first data row is the first benign sample of the first suite
  std::istringstream in(csv);
  std::string line;
  for (int i = 0; i < 4; ++i) std::getline(in, line);
  std::istringstream row(line);
  std::string field;
  std::vector<std::string> fields;
  while (std::getline(row, field, ',')) fields.push_back(field);
  const size_t nearest_from_csv = std::stoul(fields[5]);

  const BenchContext ctx = build_bench_context(spec);
  const AnchorSet anchors = extract_anchors(
      *backend, spec.client_role, ctx.anchor_query_pool, ctx.anchor_doc_pool, 16,
      spec.layer_sets.front(), spec.anchor_seed, spec.pooling);
  const auto pooled = embed_text(*backend, ctx.suites[0].benign[0], spec.layer_sets.front(),
                                 spec.pooling);
  size_t best = 0;
  double best_d = squared_distance(pooled[0], anchors.query_anchors[0].activations[0]);
  for (size_t j = 1; j < anchors.query_anchors.size(); ++j) {
    const double d = squared_distance(pooled[0], anchors.query_anchors[j].activations[0]);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  CHECK(nearest_from_csv == best);
}

TEST_CASE("experiment specs load from json and reject garbage") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "rf_spec_test.json").string();
  {
    std::ofstream out(path);
    out << R"({"experiment": {"queries_per_role": 80, "anchor_counts": [4, 8],
               "risks": ["reconnaissance", "poisoning"], "eval_benign": 10, "eval_attack": 10},
               "backend": {"layers": 2, "width": 16, "heads": 2, "seed": 3, "pretrain": false}})";
  }
  const ExperimentSpec s = ExperimentSpec::from_json_file(path);
  CHECK(s.queries_per_role == 80);
  CHECK(s.anchor_counts == std::vector<size_t>{4, 8});
  CHECK(s.risks.size() == 2);
  CHECK(s.backend.width == 16);
  CHECK_FALSE(s.pretrain_backend);
  CHECK(s.config_hash() == ExperimentSpec::from_json_file(path).config_hash());

  {
    std::ofstream out(path);
    out << "{ not json";
  }
  try {
    ExperimentSpec::from_json_file(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SpecInvalid);
  }
  std::filesystem::remove(path);
}
