#include "ragfire/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>

namespace ragfire {

double macc(const ConfusionCounts& c) {
  if (c.total() == 0) throw Error(ErrorCode::EmptyCounts, "confusion table is empty");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorCode::SpecInvalid, "scores and labels must align");
  }
  size_t positives = 0;
  for (int l : labels) positives += l != 0 ? 1 : 0;
  const size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw Error(ErrorCode::SingleClass, "auroc needs both classes");
  }

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&scores](size_t a, size_t b) { return scores[a] < scores[b]; });

  // average ranks over tie groups, 1-based
  double positive_rank_sum = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k) {
      if (labels[order[k]] != 0) positive_rank_sum += avg_rank;
    }
    i = j + 1;
  }
  const double u = positive_rank_sum -
                   static_cast<double>(positives) * (static_cast<double>(positives) + 1.0) / 2.0;
  return u / (static_cast<double>(positives) * static_cast<double>(negatives));
}

Prf prf(const ConfusionCounts& c) {
  Prf out;
  out.precision = (c.tp + c.fp) == 0 ? 0.0
                                     : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  out.recall = (c.tp + c.fn) == 0 ? 0.0
                                  : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  out.f1 = (out.precision + out.recall) == 0.0
               ? 0.0
               : 2.0 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

double bertscore_precision(std::span<const std::string> candidate_units,
                           std::span<const std::string> reference_units,
                           const Encoder& encoder) {
  if (candidate_units.empty() || reference_units.empty()) {
    throw Error(ErrorCode::EmptyList, "bertscore needs nonempty candidate and reference lists");
  }
  const Encoder enc = encoder ? encoder : Encoder([](std::string_view t) { return encode(t); });
  std::vector<Embedding> refs;
  refs.reserve(reference_units.size());
  for (const std::string& r : reference_units) refs.push_back(enc(r));

  double total = 0.0;
  for (const std::string& c : candidate_units) {
    const Embedding ce = enc(c);
    double best = -1.0;
    for (const Embedding& re : refs) best = std::max(best, cosine(ce, re));
    total += best;
  }
  return total / static_cast<double>(candidate_units.size());
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
  out << "risk,model,dataset,auroc,macc,precision,recall,f1\n";
  out.precision(17);
  for (const MetricsRow& r : rows) {
    out << r.risk << ',' << r.model << ',' << r.dataset << ',' << r.auroc << ',' << r.macc << ','
        << r.precision << ',' << r.recall << ',' << r.f1 << '\n';
  }
}

}  // namespace ragfire
