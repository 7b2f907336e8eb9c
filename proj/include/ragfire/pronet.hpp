#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ragfire/backend.hpp"
#include "ragfire/detection.hpp"

namespace ragfire {

enum class CorrectionActivation { Tanh, Identity };

// Per-client, per-layer low-rank correction: delta(x) = B * act(A * x), with
// A mapping width -> rank (stored row-major [rank][width]) and B mapping
// rank -> width (stored row-major [width][rank]). B starts at zero, so a
// fresh ProNet is exactly neutral. The injected signal is epsilon * delta.
struct ProNetParams {
  std::string client;
  int layer = 0;
  int width = 0;
  int rank = 4;
  double epsilon = 1.0;
  double alpha = 1.0;
  uint64_t seed = 0;
  CorrectionActivation activation = CorrectionActivation::Tanh;
  std::vector<double> a;
  std::vector<double> b;

  // training metadata
  size_t trained_steps = 0;
  double learning_rate = 0.0;
};

ProNetParams init_pronet(const std::string& client, int layer, int width, int rank = 4,
                         double epsilon = 1.0, double alpha = 1.0, uint64_t seed = 0);

std::vector<double> correction(std::span<const double> hidden, const ProNetParams& params);

// Registers the epsilon-scaled correction hook at params.layer; the handle
// removes it on scope exit. The base model weights are never touched.
ScopedInjection apply(ActivationBackend& backend, const ProNetParams& params);

struct LossBreakdown {
  double asi = 0.0;
  double ce = 0.0;
  double combined = 0.0;
};

// L_ASI: mean over flagged texts of the layer-averaged normalized ASI of the
// corrected activations against the query anchors. L_CE: mean cross-entropy
// over benign texts, hook applied. combined = asi + alpha * ce, or
// asi - alpha * ce when v1_subtract_ce is set (the earlier formulation, kept
// for study).
LossBreakdown loss(ActivationBackend& backend, const ProNetParams& params,
                   std::span<const std::string> benign_batch,
                   std::span<const std::string> flagged_batch, const AnchorSet& anchors,
                   std::span<const int> layer_set, bool v1_subtract_ce = false);

struct ProNetGradients {
  std::vector<double> a;
  std::vector<double> b;
  LossBreakdown value;
};

ProNetGradients gradient(ActivationBackend& backend, const ProNetParams& params,
                         std::span<const std::string> benign_batch,
                         std::span<const std::string> flagged_batch, const AnchorSet& anchors,
                         std::span<const int> layer_set, bool v1_subtract_ce = false);

// Central finite differences (step 1e-5) at `coords` seeded coordinates of
// (A, B); returns the max relative error against the analytic gradient.
double grad_check(ActivationBackend& backend, const ProNetParams& params,
                  std::span<const std::string> benign_batch,
                  std::span<const std::string> flagged_batch, const AnchorSet& anchors,
                  std::span<const int> layer_set, size_t coords, uint64_t seed,
                  bool v1_subtract_ce = false);

struct TrainingStep {
  double asi = 0.0;
  double ce = 0.0;
  double combined = 0.0;
};

struct TrainingReport {
  std::vector<TrainingStep> steps;  // loss before each update
  LossBreakdown initial;
  LossBreakdown final_loss;
  double grad_check_max_rel_error = 0.0;

  void save_csv(std::ostream& out) const;
  void save_csv_file(const std::string& path) const;
};

struct TrainingOptions {
  size_t steps = 200;
  double learning_rate = 1e-2;
  uint64_t seed = 0;
  bool v1_subtract_ce = false;
  bool run_grad_check = true;
  size_t grad_check_coords = 10;
  double grad_check_tolerance = 1e-4;
};

// Plain gradient descent on (A, B); the base model is frozen throughout.
std::pair<ProNetParams, TrainingReport> train(ActivationBackend& backend, ProNetParams params,
                                              std::span<const std::string> benign_set,
                                              std::span<const std::string> flagged_set,
                                              const AnchorSet& anchors,
                                              std::span<const int> layer_set,
                                              const TrainingOptions& options);

// Binary ProNet file, magic "RFPN": header (client, layer, d, r, epsilon,
// alpha, seed) then A and B row-major as 64-bit floats.
void save_pronet(const ProNetParams& params, std::ostream& out);
void save_pronet_file(const ProNetParams& params, const std::string& path);
ProNetParams load_pronet(std::istream& in);
ProNetParams load_pronet_file(const std::string& path);

}  // namespace ragfire
