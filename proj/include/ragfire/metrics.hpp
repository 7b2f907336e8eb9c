#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ragfire/retrieval.hpp"

namespace ragfire {

struct ConfusionCounts {
  size_t tp = 0;
  size_t tn = 0;
  size_t fp = 0;
  size_t fn = 0;

  size_t total() const { return tp + tn + fp + fn; }
};

// (tp + tn) / total
double macc(const ConfusionCounts& c);

// Probability a random positive outscores a random negative, ties counted
// one half (Mann-Whitney, computed from average ranks).
double auroc(std::span<const double> scores, std::span<const int> labels);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// precision = tp/(tp+fp), recall = tp/(tp+fn), f1 their harmonic mean; each
// is 0 when its denominator is 0.
Prf prf(const ConfusionCounts& c);

using Encoder = std::function<Embedding(std::string_view)>;

// mean over candidates of the max embedding cosine against the references;
// the default encoder is the retrieval module's hashing encoder, and any
// drop-in embedding function may be substituted.
double bertscore_precision(std::span<const std::string> candidate_units,
                           std::span<const std::string> reference_units,
                           const Encoder& encoder = {});

struct MetricsRow {
  std::string risk;
  std::string model;
  std::string dataset;
  double auroc = 0.0;
  double macc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Fixed header: risk,model,dataset,auroc,macc,precision,recall,f1
void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows);

}  // namespace ragfire
