#include "ragfire/pronet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ragfire {

namespace {

double act_forward(double z, CorrectionActivation act) {
  return act == CorrectionActivation::Tanh ? std::tanh(z) : z;
}

double act_grad(double z, CorrectionActivation act) {
  if (act == CorrectionActivation::Identity) return 1.0;
  const double t = std::tanh(z);
  return 1.0 - t * t;
}

// Injection hook computing epsilon * B * act(A * h); its backward accumulates
// dL/dA and dL/dB and adds the Jacobian-transpose term to the hidden-state
// gradient.
class ProNetHook : public InjectionHook {
 public:
  explicit ProNetHook(const ProNetParams& params)
      : p_(params), ga_(params.a.size(), 0.0), gb_(params.b.size(), 0.0) {}

  void delta(std::span<const double> hidden, std::span<double> out) const override {
    const int r = p_.rank;
    const int d = p_.width;
    std::vector<double> s(static_cast<size_t>(r));
    for (int j = 0; j < r; ++j) {
      const double* row = p_.a.data() + static_cast<size_t>(j) * d;
      double z = 0.0;
      for (int k = 0; k < d; ++k) z += row[k] * hidden[static_cast<size_t>(k)];
      s[static_cast<size_t>(j)] = act_forward(z, p_.activation);
    }
    for (int i = 0; i < d; ++i) {
      const double* row = p_.b.data() + static_cast<size_t>(i) * r;
      double v = 0.0;
      for (int j = 0; j < r; ++j) v += row[j] * s[static_cast<size_t>(j)];
      out[static_cast<size_t>(i)] = p_.epsilon * v;
    }
  }

  void backward(std::span<const double> hidden, std::span<const double> g_out,
                std::span<double> g_hidden) override {
    const int r = p_.rank;
    const int d = p_.width;
    std::vector<double> z(static_cast<size_t>(r));
    std::vector<double> s(static_cast<size_t>(r));
    for (int j = 0; j < r; ++j) {
      const double* row = p_.a.data() + static_cast<size_t>(j) * d;
      double zj = 0.0;
      for (int k = 0; k < d; ++k) zj += row[k] * hidden[static_cast<size_t>(k)];
      z[static_cast<size_t>(j)] = zj;
      s[static_cast<size_t>(j)] = act_forward(zj, p_.activation);
    }
    // delta_i = eps * sum_j B[i][j] s_j
    std::vector<double> gs(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < d; ++i) {
      const double g = p_.epsilon * g_out[static_cast<size_t>(i)];
      double* gb_row = gb_.data() + static_cast<size_t>(i) * r;
      const double* b_row = p_.b.data() + static_cast<size_t>(i) * r;
      for (int j = 0; j < r; ++j) {
        gb_row[j] += g * s[static_cast<size_t>(j)];
        gs[static_cast<size_t>(j)] += g * b_row[j];
      }
    }
    for (int j = 0; j < r; ++j) {
      const double gz = gs[static_cast<size_t>(j)] * act_grad(z[static_cast<size_t>(j)], p_.activation);
      double* ga_row = ga_.data() + static_cast<size_t>(j) * d;
      const double* a_row = p_.a.data() + static_cast<size_t>(j) * d;
      for (int k = 0; k < d; ++k) {
        ga_row[k] += gz * hidden[static_cast<size_t>(k)];
        g_hidden[static_cast<size_t>(k)] += a_row[k] * gz;
      }
    }
  }

  const std::vector<double>& grad_a() const { return ga_; }
  const std::vector<double>& grad_b() const { return gb_; }

 private:
  const ProNetParams& p_;
  std::vector<double> ga_;
  std::vector<double> gb_;
};

std::vector<size_t> layer_indices(const AnchorSet& anchors, std::span<const int> layer_set) {
  std::vector<size_t> idx;
  idx.reserve(layer_set.size());
  for (int layer : layer_set) idx.push_back(anchors.layer_index(layer));
  return idx;
}

// Layer-averaged normalized ASI of one pooled activation set, plus (optionally)
// the gradient w.r.t. each pooled vector.
double asi_of_pooled(const std::vector<std::vector<double>>& pooled,
                     const AnchorSet& anchors, const std::vector<size_t>& anchor_layer_idx,
                     std::vector<std::vector<double>>* pooled_grads) {
  const auto& entries = anchors.query_anchors;
  const size_t n = entries.size();
  const size_t n_layers = anchor_layer_idx.size();
  double total = 0.0;
  std::vector<double> terms(n);
  for (size_t li = 0; li < n_layers; ++li) {
    const std::vector<double>& target = pooled[li];
    for (size_t j = 0; j < n; ++j) {
      terms[j] = squared_distance(target, entries[j].activations[anchor_layer_idx[li]]);
    }
    std::sort(terms.begin(), terms.end());
    double raw = 0.0;
    for (double t : terms) raw += t;
    total += raw / static_cast<double>(n);

    if (pooled_grads != nullptr) {
      // d/da (1/n) sum_j ||a - q_j||^2 = 2 (a - mean_j q_j)
      std::vector<double>& g = (*pooled_grads)[li];
      g.assign(target.size(), 0.0);
      for (size_t j = 0; j < n; ++j) {
        const std::vector<double>& q = entries[j].activations[anchor_layer_idx[li]];
        for (size_t k = 0; k < target.size(); ++k) g[k] += target[k] - q[k];
      }
      for (double& v : g) v *= 2.0 / static_cast<double>(n);
    }
  }
  return total / static_cast<double>(n_layers);
}

double combine(double asi_part, double ce_part, double alpha, bool v1_subtract_ce) {
  return v1_subtract_ce ? asi_part - alpha * ce_part : asi_part + alpha * ce_part;
}

}  // namespace

ProNetParams init_pronet(const std::string& client, int layer, int width, int rank,
                         double epsilon, double alpha, uint64_t seed) {
  ProNetParams p;
  p.client = client;
  p.layer = layer;
  p.width = width;
  p.rank = rank;
  p.epsilon = epsilon;
  p.alpha = alpha;
  p.seed = seed;
  p.a.assign(static_cast<size_t>(rank) * width, 0.0);
  p.b.assign(static_cast<size_t>(width) * rank, 0.0);
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));
  for (double& v : p.a) v = rng.gaussian() * scale;
  // B stays zero: a fresh ProNet is exactly neutral until trained.
  return p;
}

std::vector<double> correction(std::span<const double> hidden, const ProNetParams& params) {
  if (hidden.size() != static_cast<size_t>(params.width)) {
    throw Error(ErrorCode::WidthMismatch, "hidden width " + std::to_string(hidden.size()) +
                                              " vs ProNet width " + std::to_string(params.width));
  }
  const int r = params.rank;
  const int d = params.width;
  std::vector<double> s(static_cast<size_t>(r));
  for (int j = 0; j < r; ++j) {
    const double* row = params.a.data() + static_cast<size_t>(j) * d;
    double z = 0.0;
    for (int k = 0; k < d; ++k) z += row[k] * hidden[static_cast<size_t>(k)];
    s[static_cast<size_t>(j)] = act_forward(z, params.activation);
  }
  std::vector<double> out(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) {
    const double* row = params.b.data() + static_cast<size_t>(i) * r;
    double v = 0.0;
    for (int j = 0; j < r; ++j) v += row[j] * s[static_cast<size_t>(j)];
    out[static_cast<size_t>(i)] = v;
  }
  return out;
}

ScopedInjection apply(ActivationBackend& backend, const ProNetParams& params) {
  if (params.layer < 0 || params.layer >= backend.layer_count()) {
    throw Error(ErrorCode::BadLayer, "ProNet layer " + std::to_string(params.layer));
  }
  if (params.width != backend.width()) {
    throw Error(ErrorCode::WidthMismatch, "ProNet width does not match backend");
  }
  auto hook = std::make_shared<ProNetHook>(params);
  // The hook keeps the params alive via a copy so detached callers stay safe.
  struct OwningHook : InjectionHook {
    explicit OwningHook(ProNetParams p) : params(std::move(p)), hook(params) {}
    void delta(std::span<const double> hidden, std::span<double> out) const override {
      hook.delta(hidden, out);
    }
    void backward(std::span<const double> hidden, std::span<const double> g_out,
                  std::span<double> g_hidden) override {
      hook.backward(hidden, g_out, g_hidden);
    }
    ProNetParams params;
    ProNetHook hook;
  };
  const uint64_t handle =
      backend.register_injection(params.layer, std::make_shared<OwningHook>(params));
  return ScopedInjection(&backend, handle);
}

LossBreakdown loss(ActivationBackend& backend, const ProNetParams& params,
                   std::span<const std::string> benign_batch,
                   std::span<const std::string> flagged_batch, const AnchorSet& anchors,
                   std::span<const int> layer_set, bool v1_subtract_ce) {
  if (benign_batch.empty() || flagged_batch.empty()) {
    throw Error(ErrorCode::EmptyBatch, "loss needs nonempty benign and flagged batches");
  }
  if (anchors.query_anchors.empty()) throw Error(ErrorCode::NoAnchors, "no query anchors");
  const auto anchor_layer_idx = layer_indices(anchors, layer_set);

  const ScopedInjection injection = apply(backend, params);
  double asi_sum = 0.0;
  for (const std::string& text : flagged_batch) {
    const auto pooled = embed_text(backend, text, layer_set, anchors.pooling);
    asi_sum += asi_of_pooled(pooled, anchors, anchor_layer_idx, nullptr);
  }
  double ce_sum = 0.0;
  for (const std::string& text : benign_batch) {
    ce_sum += backend.cross_entropy(backend.tokenize(text));
  }

  LossBreakdown out;
  out.asi = asi_sum / static_cast<double>(flagged_batch.size());
  out.ce = ce_sum / static_cast<double>(benign_batch.size());
  out.combined = combine(out.asi, out.ce, params.alpha, v1_subtract_ce);
  return out;
}

ProNetGradients gradient(ActivationBackend& backend, const ProNetParams& params,
                         std::span<const std::string> benign_batch,
                         std::span<const std::string> flagged_batch, const AnchorSet& anchors,
                         std::span<const int> layer_set, bool v1_subtract_ce) {
  if (benign_batch.empty() || flagged_batch.empty()) {
    throw Error(ErrorCode::EmptyBatch, "gradient needs nonempty benign and flagged batches");
  }
  auto* grad_backend = dynamic_cast<GradientBackend*>(&backend);
  if (grad_backend == nullptr) {
    throw Error(ErrorCode::BackendUnavailable, "backend does not expose gradients");
  }
  const auto anchor_layer_idx = layer_indices(anchors, layer_set);

  auto hook = std::make_shared<ProNetHook>(params);
  const uint64_t handle = backend.register_injection(params.layer, hook);

  ProNetGradients out;
  double asi_sum = 0.0;
  double ce_sum = 0.0;
  try {
    const double asi_weight = 1.0 / static_cast<double>(flagged_batch.size());
    std::vector<std::vector<double>> pooled_grads(layer_set.size());
    for (const std::string& text : flagged_batch) {
      const TokenSequence tokens = backend.tokenize(text);
      const ForwardResult fwd = backend.forward(tokens, layer_set);
      std::vector<std::vector<double>> pooled;
      pooled.reserve(layer_set.size());
      for (int layer : layer_set) pooled.push_back(pool(fwd.activations, layer, anchors.pooling));
      asi_sum += asi_of_pooled(pooled, anchors, anchor_layer_idx, &pooled_grads);

      BackwardRequest req;
      const double layer_weight = asi_weight / static_cast<double>(layer_set.size());
      for (size_t li = 0; li < layer_set.size(); ++li) {
        TapGradient tg;
        tg.layer = layer_set[li];
        tg.pooling = anchors.pooling;
        tg.pooled_grad = pooled_grads[li];
        for (double& v : tg.pooled_grad) v *= layer_weight;
        req.tap_grads.push_back(std::move(tg));
      }
      grad_backend->backward(tokens, req);
    }

    const double ce_weight = (v1_subtract_ce ? -params.alpha : params.alpha) /
                             static_cast<double>(benign_batch.size());
    for (const std::string& text : benign_batch) {
      BackwardRequest req;
      req.ce_weight = ce_weight;
      const BackwardResult r = grad_backend->backward(backend.tokenize(text), req);
      ce_sum += r.cross_entropy;
    }
  } catch (...) {
    backend.remove_injection(handle);
    throw;
  }
  backend.remove_injection(handle);

  out.a = hook->grad_a();
  out.b = hook->grad_b();
  out.value.asi = asi_sum / static_cast<double>(flagged_batch.size());
  out.value.ce = ce_sum / static_cast<double>(benign_batch.size());
  out.value.combined = combine(out.value.asi, out.value.ce, params.alpha, v1_subtract_ce);
  return out;
}

double grad_check(ActivationBackend& backend, const ProNetParams& params,
                  std::span<const std::string> benign_batch,
                  std::span<const std::string> flagged_batch, const AnchorSet& anchors,
                  std::span<const int> layer_set, size_t coords, uint64_t seed,
                  bool v1_subtract_ce) {
  const ProNetGradients analytic =
      gradient(backend, params, benign_batch, flagged_batch, anchors, layer_set, v1_subtract_ce);
  const size_t total_coords = params.a.size() + params.b.size();
  Rng rng(seed);
  const double step = 1e-5;
  double worst = 0.0;
  for (size_t c = 0; c < coords; ++c) {
    const size_t idx = static_cast<size_t>(rng.below(total_coords));
    ProNetParams plus = params;
    ProNetParams minus = params;
    double analytic_g = 0.0;
    if (idx < params.a.size()) {
      plus.a[idx] += step;
      minus.a[idx] -= step;
      analytic_g = analytic.a[idx];
    } else {
      const size_t bi = idx - params.a.size();
      plus.b[bi] += step;
      minus.b[bi] -= step;
      analytic_g = analytic.b[bi];
    }
    const double up =
        loss(backend, plus, benign_batch, flagged_batch, anchors, layer_set, v1_subtract_ce)
            .combined;
    const double down =
        loss(backend, minus, benign_batch, flagged_batch, anchors, layer_set, v1_subtract_ce)
            .combined;
    const double fd = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(fd), std::abs(analytic_g), 1e-8});
    worst = std::max(worst, std::abs(fd - analytic_g) / denom);
  }
  return worst;
}

std::pair<ProNetParams, TrainingReport> train(ActivationBackend& backend, ProNetParams params,
                                              std::span<const std::string> benign_set,
                                              std::span<const std::string> flagged_set,
                                              const AnchorSet& anchors,
                                              std::span<const int> layer_set,
                                              const TrainingOptions& options) {
  if (benign_set.empty() || flagged_set.empty()) {
    throw Error(ErrorCode::EmptyBatch, "training needs nonempty benign and flagged sets");
  }
  TrainingReport report;

  if (options.run_grad_check) {
    const size_t nb = std::min<size_t>(benign_set.size(), 4);
    const size_t nf = std::min<size_t>(flagged_set.size(), 4);
    report.grad_check_max_rel_error =
        grad_check(backend, params, benign_set.subspan(0, nb), flagged_set.subspan(0, nf),
                   anchors, layer_set, options.grad_check_coords, options.seed,
                   options.v1_subtract_ce);
    if (!(report.grad_check_max_rel_error < options.grad_check_tolerance)) {
      throw Error(ErrorCode::GradCheckFailed,
                  "max relative error " + std::to_string(report.grad_check_max_rel_error));
    }
  }

  params.learning_rate = options.learning_rate;
  for (size_t step = 0; step < options.steps; ++step) {
    const ProNetGradients g = gradient(backend, params, benign_set, flagged_set, anchors,
                                       layer_set, options.v1_subtract_ce);
    if (!std::isfinite(g.value.combined)) {
      throw Error(ErrorCode::DivergedLoss, "non-finite loss at step " + std::to_string(step));
    }
    report.steps.push_back({g.value.asi, g.value.ce, g.value.combined});
    for (size_t i = 0; i < params.a.size(); ++i) params.a[i] -= options.learning_rate * g.a[i];
    for (size_t i = 0; i < params.b.size(); ++i) params.b[i] -= options.learning_rate * g.b[i];
    params.trained_steps += 1;
  }

  const LossBreakdown final_loss =
      loss(backend, params, benign_set, flagged_set, anchors, layer_set, options.v1_subtract_ce);
  report.final_loss = final_loss;
  report.initial = report.steps.empty() ? final_loss
                                        : LossBreakdown{report.steps.front().asi,
                                                        report.steps.front().ce,
                                                        report.steps.front().combined};
  return {std::move(params), std::move(report)};
}

void TrainingReport::save_csv(std::ostream& out) const {
  out << "step,l_asi,l_ce,l\n";
  out.precision(17);
  for (size_t i = 0; i < steps.size(); ++i) {
    out << i << "," << steps[i].asi << "," << steps[i].ce << "," << steps[i].combined << "\n";
  }
}

void TrainingReport::save_csv_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  save_csv(out);
}

namespace {

void write_u32(std::ostream& out, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

void write_u64(std::ostream& out, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

void write_f64(std::ostream& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in) {
  const uint64_t bits = read_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_pronet(const ProNetParams& params, std::ostream& out) {
  out.write("RFPN", 4);
  write_u32(out, 1);
  write_u32(out, static_cast<uint32_t>(params.client.size()));
  out.write(params.client.data(), static_cast<std::streamsize>(params.client.size()));
  write_u32(out, static_cast<uint32_t>(params.layer));
  write_u32(out, static_cast<uint32_t>(params.width));
  write_u32(out, static_cast<uint32_t>(params.rank));
  write_f64(out, params.epsilon);
  write_f64(out, params.alpha);
  write_u64(out, params.seed);
  for (double v : params.a) write_f64(out, v);
  for (double v : params.b) write_f64(out, v);
}

void save_pronet_file(const ProNetParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  save_pronet(params, out);
}

ProNetParams load_pronet(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RFPN", 4) != 0) {
    throw Error(ErrorCode::ConfigInvalid, "not an RFPN file");
  }
  if (read_u32(in) != 1) throw Error(ErrorCode::ConfigInvalid, "unsupported RFPN version");
  ProNetParams p;
  const uint32_t name_len = read_u32(in);
  p.client.resize(name_len);
  in.read(p.client.data(), static_cast<std::streamsize>(name_len));
  p.layer = static_cast<int>(read_u32(in));
  p.width = static_cast<int>(read_u32(in));
  p.rank = static_cast<int>(read_u32(in));
  p.epsilon = read_f64(in);
  p.alpha = read_f64(in);
  p.seed = read_u64(in);
  p.a.resize(static_cast<size_t>(p.rank) * p.width);
  p.b.resize(static_cast<size_t>(p.width) * p.rank);
  for (double& v : p.a) v = read_f64(in);
  for (double& v : p.b) v = read_f64(in);
  if (!in) throw Error(ErrorCode::IoError, "truncated RFPN file");
  return p;
}

ProNetParams load_pronet_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return load_pronet(in);
}

}  // namespace ragfire
