#include "ragfire/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ragfire {

namespace {

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;
constexpr double kLnEps = 1e-5;

double gelu(double x) {
  const double u = kGeluK * (x + kGeluC * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluK * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

// y = W x + b with W row-major [out][in]
void linear_forward(const double* w, const double* b, const double* x, double* y, int out_dim,
                    int in_dim) {
  for (int o = 0; o < out_dim; ++o) {
    const double* row = w + static_cast<size_t>(o) * in_dim;
    double s = b != nullptr ? b[o] : 0.0;
    for (int i = 0; i < in_dim; ++i) s += row[i] * x[i];
    y[o] = s;
  }
}

// Accumulating backward for y = W x + b. Any of gw/gb/gx may be null.
void linear_backward(const double* w, const double* x, const double* gy, double* gw, double* gb,
                     double* gx, int out_dim, int in_dim) {
  for (int o = 0; o < out_dim; ++o) {
    const double g = gy[o];
    if (gb != nullptr) gb[o] += g;
    if (gw != nullptr) {
      double* grow = gw + static_cast<size_t>(o) * in_dim;
      for (int i = 0; i < in_dim; ++i) grow[i] += g * x[i];
    }
    if (gx != nullptr) {
      const double* row = w + static_cast<size_t>(o) * in_dim;
      for (int i = 0; i < in_dim; ++i) gx[i] += row[i] * g;
    }
  }
}

void layernorm_forward(const double* x, const double* gamma, const double* beta, double* y,
                       double* mean_out, double* rstd_out, int d) {
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= d;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < d; ++i) y[i] = gamma[i] * ((x[i] - mean) * rstd) + beta[i];
  *mean_out = mean;
  *rstd_out = rstd;
}

void layernorm_backward(const double* x, const double* gamma, double mean, double rstd,
                        const double* gy, double* ggamma, double* gbeta, double* gx, int d) {
  double sum_g = 0.0;
  double sum_gx = 0.0;
  for (int i = 0; i < d; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double g = gy[i] * gamma[i];
    sum_g += g;
    sum_gx += g * xhat;
    if (ggamma != nullptr) ggamma[i] += gy[i] * xhat;
    if (gbeta != nullptr) gbeta[i] += gy[i];
  }
  const double inv_d = 1.0 / d;
  for (int i = 0; i < d; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double g = gy[i] * gamma[i];
    gx[i] += rstd * (g - inv_d * sum_g - xhat * inv_d * sum_gx);
  }
}

struct BlockOffsets {
  size_t ln1_g, ln1_b;
  size_t wq, bq, wk, bk, wv, bv, wo, bo;
  size_t ln2_g, ln2_b;
  size_t wfc, bfc, wproj, bproj;
};

// Flat weight layout; the serialized file stores tensors in exactly this order.
struct Layout {
  size_t tok, pos;
  std::vector<BlockOffsets> blocks;
  size_t lnf_g, lnf_b, unembed;
  size_t total;

  explicit Layout(const ToyLmConfig& c) {
    const size_t d = static_cast<size_t>(c.width);
    const size_t hidden = 4 * d;
    size_t at = 0;
    auto take = [&at](size_t n) {
      const size_t here = at;
      at += n;
      return here;
    };
    tok = take(static_cast<size_t>(kVocabSize) * d);
    pos = take(static_cast<size_t>(c.context) * d);
    blocks.reserve(static_cast<size_t>(c.layers));
    for (int l = 0; l < c.layers; ++l) {
      BlockOffsets b{};
      b.ln1_g = take(d);
      b.ln1_b = take(d);
      b.wq = take(d * d);
      b.bq = take(d);
      b.wk = take(d * d);
      b.bk = take(d);
      b.wv = take(d * d);
      b.bv = take(d);
      b.wo = take(d * d);
      b.bo = take(d);
      b.ln2_g = take(d);
      b.ln2_b = take(d);
      b.wfc = take(hidden * d);
      b.bfc = take(hidden);
      b.wproj = take(d * hidden);
      b.bproj = take(d);
      blocks.push_back(b);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    unembed = take(static_cast<size_t>(kVocabSize) * d);
    total = at;
  }
};

class LambdaHook : public InjectionHook {
 public:
  explicit LambdaHook(HookFn fn) : fn_(std::move(fn)) {}
  void delta(std::span<const double> hidden, std::span<double> out) const override {
    const std::vector<double> v = fn_(hidden);
    std::copy(v.begin(), v.end(), out.begin());
  }

 private:
  HookFn fn_;
};

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

}  // namespace

Pooling pooling_from_name(std::string_view name) {
  if (name == "mean") return Pooling::Mean;
  if (name == "last-token" || name == "last_token" || name == "last") return Pooling::LastToken;
  throw Error(ErrorCode::ConfigInvalid, "unknown pooling '" + std::string(name) + "'");
}

const char* pooling_name(Pooling p) {
  return p == Pooling::Mean ? "mean" : "last-token";
}

std::vector<double> pool(std::span<const double> rows, size_t tokens, size_t width,
                         Pooling strategy) {
  if (tokens == 0) throw Error(ErrorCode::Empty, "pool needs at least one token row");
  std::vector<double> out(width, 0.0);
  if (strategy == Pooling::LastToken) {
    const double* last = rows.data() + (tokens - 1) * width;
    std::copy(last, last + width, out.begin());
    return out;
  }
  for (size_t t = 0; t < tokens; ++t) {
    const double* row = rows.data() + t * width;
    for (size_t i = 0; i < width; ++i) out[i] += row[i];
  }
  const double inv = 1.0 / static_cast<double>(tokens);
  for (double& v : out) v *= inv;
  return out;
}

uint64_t ActivationBackend::register_injection(int layer, HookFn fn) {
  return register_injection(layer, std::make_shared<LambdaHook>(std::move(fn)));
}

struct ToyLm::ForwardCache {
  size_t T = 0;
  std::vector<double> x0;
  struct Block {
    std::vector<double> ln1_out, ln1_mean, ln1_rstd;
    std::vector<double> q, k, v;
    std::vector<double> att;      // heads * T * T
    std::vector<double> att_mix;  // T x d, heads re-concatenated
    std::vector<double> x_mid;
    std::vector<double> ln2_out, ln2_mean, ln2_rstd;
    std::vector<double> fc_pre, fc_act;  // T x 4d
    std::vector<double> x_post;          // pre-injection stream
    std::vector<double> x_out;           // post-injection stream (the tapped value)
  };
  std::vector<Block> blocks;
  std::vector<double> lnf_out, lnf_mean, lnf_rstd;
  std::vector<double> logprobs;
};

ToyLm::ToyLm(const ToyLmConfig& config) : config_(config) {
  if (config.width % config.heads != 0) {
    throw Error(ErrorCode::ConfigInvalid, "width must be divisible by head count");
  }
  const Layout layout(config_);
  weights_.assign(layout.total, 0.0);
  Rng rng(config.seed);
  for (double& w : weights_) w = rng.gaussian() * 0.08;
  // LayerNorm affine params and biases start at identity / zero.
  auto set = [this](size_t off, size_t n, double v) {
    std::fill(weights_.begin() + static_cast<long>(off), weights_.begin() + static_cast<long>(off + n), v);
  };
  const size_t d = static_cast<size_t>(config_.width);
  for (const BlockOffsets& b : layout.blocks) {
    set(b.ln1_g, d, 1.0);
    set(b.ln1_b, d, 0.0);
    set(b.bq, d, 0.0);
    set(b.bk, d, 0.0);
    set(b.bv, d, 0.0);
    set(b.bo, d, 0.0);
    set(b.ln2_g, d, 1.0);
    set(b.ln2_b, d, 0.0);
    set(b.bfc, 4 * d, 0.0);
    set(b.bproj, d, 0.0);
  }
  set(layout.lnf_g, d, 1.0);
  set(layout.lnf_b, d, 0.0);
}

ToyLm::ToyLm(const ToyLmConfig& config, std::vector<double> weights) : config_(config) {
  const Layout layout(config_);
  if (weights.size() != layout.total) {
    throw Error(ErrorCode::ConfigInvalid, "weight vector size mismatch");
  }
  weights_ = std::move(weights);
}

// The mutex and once flag start fresh; a moved model recomputes its
// fingerprint on first use (same bytes, same value).
ToyLm::ToyLm(ToyLm&& other) noexcept
    : config_(other.config_),
      weights_(std::move(other.weights_)),
      hooks_(std::move(other.hooks_)),
      next_handle_(other.next_handle_) {}

TokenSequence ToyLm::tokenize(std::string_view text) const {
  if (text.size() > static_cast<size_t>(config_.context) - 2) {
    throw Error(ErrorCode::OverLength, "text of " + std::to_string(text.size()) +
                                           " bytes exceeds context budget");
  }
  TokenSequence seq;
  seq.ids.reserve(text.size() + 2);
  seq.ids.push_back(kBosToken);
  for (unsigned char c : text) seq.ids.push_back(static_cast<int>(c));
  seq.ids.push_back(kEosToken);
  return seq;
}

std::string ToyLm::detokenize(const TokenSequence& tokens) const {
  std::string out;
  out.reserve(tokens.ids.size());
  for (int id : tokens.ids) {
    if (id >= 0 && id < kByteVocab) out.push_back(static_cast<char>(id));
  }
  return out;
}

void ToyLm::check_tokens(const TokenSequence& tokens) const {
  if (tokens.empty()) throw Error(ErrorCode::Empty, "empty token sequence");
  if (tokens.size() > static_cast<size_t>(config_.context)) {
    throw Error(ErrorCode::OverLength, "sequence longer than context window");
  }
  for (int id : tokens.ids) {
    if (id < 0 || id >= kVocabSize) throw Error(ErrorCode::ConfigInvalid, "token id out of range");
  }
}

std::vector<std::pair<uint64_t, std::shared_ptr<InjectionHook>>> ToyLm::hooks_at(int layer) const {
  std::shared_lock lock(hook_mutex_);
  auto it = hooks_.find(layer);
  if (it == hooks_.end()) return {};
  return it->second;
}

uint64_t ToyLm::register_injection(int layer, std::shared_ptr<InjectionHook> hook) {
  if (layer < 0 || layer >= config_.layers) {
    throw Error(ErrorCode::BadLayer, "layer " + std::to_string(layer));
  }
  std::unique_lock lock(hook_mutex_);
  const uint64_t handle = next_handle_++;
  hooks_[layer].emplace_back(handle, std::move(hook));
  return handle;
}

void ToyLm::remove_injection(uint64_t handle) {
  std::unique_lock lock(hook_mutex_);
  for (auto& [layer, list] : hooks_) {
    auto it = std::find_if(list.begin(), list.end(),
                           [handle](const auto& e) { return e.first == handle; });
    if (it != list.end()) {
      list.erase(it);
      return;
    }
  }
}

void ToyLm::run_forward(const TokenSequence& tokens, std::span<const int> taps,
                        ForwardCache* cache, ForwardResult* result) const {
  const Layout layout(config_);
  const int d = config_.width;
  const int heads = config_.heads;
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const size_t T = tokens.size();
  const double* w = weights_.data();

  cache->T = T;
  cache->x0.assign(T * d, 0.0);
  for (size_t t = 0; t < T; ++t) {
    const double* tok_row = w + layout.tok + static_cast<size_t>(tokens.ids[t]) * d;
    const double* pos_row = w + layout.pos + t * d;
    double* x_row = cache->x0.data() + t * d;
    for (int i = 0; i < d; ++i) x_row[i] = tok_row[i] + pos_row[i];
  }

  cache->blocks.assign(static_cast<size_t>(config_.layers), {});
  const std::vector<double>* stream = &cache->x0;
  for (int l = 0; l < config_.layers; ++l) {
    ForwardCache::Block& blk = cache->blocks[static_cast<size_t>(l)];
    const BlockOffsets& off = layout.blocks[static_cast<size_t>(l)];
    blk.ln1_out.assign(T * d, 0.0);
    blk.ln1_mean.assign(T, 0.0);
    blk.ln1_rstd.assign(T, 0.0);
    for (size_t t = 0; t < T; ++t) {
      layernorm_forward(stream->data() + t * d, w + off.ln1_g, w + off.ln1_b,
                        blk.ln1_out.data() + t * d, &blk.ln1_mean[t], &blk.ln1_rstd[t], d);
    }
    blk.q.assign(T * d, 0.0);
    blk.k.assign(T * d, 0.0);
    blk.v.assign(T * d, 0.0);
    for (size_t t = 0; t < T; ++t) {
      const double* in = blk.ln1_out.data() + t * d;
      linear_forward(w + off.wq, w + off.bq, in, blk.q.data() + t * d, d, d);
      linear_forward(w + off.wk, w + off.bk, in, blk.k.data() + t * d, d, d);
      linear_forward(w + off.wv, w + off.bv, in, blk.v.data() + t * d, d, d);
    }
    blk.att.assign(static_cast<size_t>(heads) * T * T, 0.0);
    blk.att_mix.assign(T * d, 0.0);
    for (int h = 0; h < heads; ++h) {
      const size_t head_off = static_cast<size_t>(h) * hd;
      double* att_h = blk.att.data() + static_cast<size_t>(h) * T * T;
      for (size_t t = 0; t < T; ++t) {
        const double* q_t = blk.q.data() + t * d + head_off;
        double* att_row = att_h + t * T;
        double max_logit = -1e300;
        for (size_t s = 0; s <= t; ++s) {
          const double* k_s = blk.k.data() + s * d + head_off;
          double dot_qk = 0.0;
          for (int i = 0; i < hd; ++i) dot_qk += q_t[i] * k_s[i];
          att_row[s] = dot_qk * scale;
          max_logit = std::max(max_logit, att_row[s]);
        }
        double denom = 0.0;
        for (size_t s = 0; s <= t; ++s) {
          att_row[s] = std::exp(att_row[s] - max_logit);
          denom += att_row[s];
        }
        const double inv = 1.0 / denom;
        for (size_t s = 0; s <= t; ++s) att_row[s] *= inv;
        double* mix = blk.att_mix.data() + t * d + head_off;
        for (size_t s = 0; s <= t; ++s) {
          const double* v_s = blk.v.data() + s * d + head_off;
          const double a = att_row[s];
          for (int i = 0; i < hd; ++i) mix[i] += a * v_s[i];
        }
      }
    }
    blk.x_mid.assign(T * d, 0.0);
    for (size_t t = 0; t < T; ++t) {
      double* out = blk.x_mid.data() + t * d;
      linear_forward(w + off.wo, w + off.bo, blk.att_mix.data() + t * d, out, d, d);
      const double* in = stream->data() + t * d;
      for (int i = 0; i < d; ++i) out[i] += in[i];
    }
    blk.ln2_out.assign(T * d, 0.0);
    blk.ln2_mean.assign(T, 0.0);
    blk.ln2_rstd.assign(T, 0.0);
    blk.fc_pre.assign(T * 4 * d, 0.0);
    blk.fc_act.assign(T * 4 * d, 0.0);
    blk.x_post.assign(T * d, 0.0);
    for (size_t t = 0; t < T; ++t) {
      layernorm_forward(blk.x_mid.data() + t * d, w + off.ln2_g, w + off.ln2_b,
                        blk.ln2_out.data() + t * d, &blk.ln2_mean[t], &blk.ln2_rstd[t], d);
      double* pre = blk.fc_pre.data() + t * 4 * d;
      linear_forward(w + off.wfc, w + off.bfc, blk.ln2_out.data() + t * d, pre, 4 * d, d);
      double* act = blk.fc_act.data() + t * 4 * d;
      for (int i = 0; i < 4 * d; ++i) act[i] = gelu(pre[i]);
      double* out = blk.x_post.data() + t * d;
      linear_forward(w + off.wproj, w + off.bproj, act, out, d, 4 * d);
      const double* mid = blk.x_mid.data() + t * d;
      for (int i = 0; i < d; ++i) out[i] += mid[i];
    }

    const auto layer_hooks = hooks_at(l);
    if (layer_hooks.empty()) {
      blk.x_out = blk.x_post;
    } else {
      blk.x_out = blk.x_post;
      std::vector<double> delta_sum(static_cast<size_t>(d));
      std::vector<double> delta_one(static_cast<size_t>(d));
      for (size_t t = 0; t < T; ++t) {
        std::fill(delta_sum.begin(), delta_sum.end(), 0.0);
        const std::span<const double> hidden(blk.x_post.data() + t * d, static_cast<size_t>(d));
        for (const auto& [handle, hook] : layer_hooks) {
          std::fill(delta_one.begin(), delta_one.end(), 0.0);
          hook->delta(hidden, delta_one);
          for (int i = 0; i < d; ++i) delta_sum[static_cast<size_t>(i)] += delta_one[static_cast<size_t>(i)];
        }
        // An exactly-zero delta must leave the stream bit-identical, so the
        // addition is skipped rather than performed with zeros.
        bool all_zero = true;
        for (int i = 0; i < d; ++i) {
          if (delta_sum[static_cast<size_t>(i)] != 0.0) {
            all_zero = false;
            break;
          }
        }
        if (!all_zero) {
          double* row = blk.x_out.data() + t * d;
          for (int i = 0; i < d; ++i) row[i] += delta_sum[static_cast<size_t>(i)];
        }
      }
    }
    stream = &blk.x_out;
  }

  cache->lnf_out.assign(T * d, 0.0);
  cache->lnf_mean.assign(T, 0.0);
  cache->lnf_rstd.assign(T, 0.0);
  cache->logprobs.assign(T * kVocabSize, 0.0);
  std::vector<double> logits(static_cast<size_t>(kVocabSize));
  for (size_t t = 0; t < T; ++t) {
    layernorm_forward(stream->data() + t * d, w + layout.lnf_g, w + layout.lnf_b,
                      cache->lnf_out.data() + t * d, &cache->lnf_mean[t], &cache->lnf_rstd[t], d);
    linear_forward(w + layout.unembed, nullptr, cache->lnf_out.data() + t * d, logits.data(),
                   kVocabSize, d);
    double max_logit = logits[0];
    for (int v = 1; v < kVocabSize; ++v) max_logit = std::max(max_logit, logits[static_cast<size_t>(v)]);
    double sum = 0.0;
    for (int v = 0; v < kVocabSize; ++v) sum += std::exp(logits[static_cast<size_t>(v)] - max_logit);
    const double lse = max_logit + std::log(sum);
    double* lp = cache->logprobs.data() + t * kVocabSize;
    for (int v = 0; v < kVocabSize; ++v) lp[v] = logits[static_cast<size_t>(v)] - lse;
  }

  if (result != nullptr) {
    result->logprobs = cache->logprobs;
    result->positions = T;
    result->vocab = kVocabSize;
    result->activations.tokens = T;
    result->activations.width = static_cast<size_t>(d);
    for (int tap : taps) {
      result->activations.layers[tap] = cache->blocks[static_cast<size_t>(tap)].x_out;
    }
  }
}

ForwardResult ToyLm::forward(const TokenSequence& tokens, std::span<const int> taps) const {
  check_tokens(tokens);
  for (int tap : taps) {
    if (tap < 0 || tap >= config_.layers) {
      throw Error(ErrorCode::BadLayer, "tap layer " + std::to_string(tap));
    }
  }
  ForwardCache cache;
  ForwardResult result;
  run_forward(tokens, taps, &cache, &result);
  return result;
}

TokenSequence ToyLm::assemble_prompt(std::string_view system_prompt, std::string_view query,
                                     std::span<const std::string> docs) const {
  TokenSequence seq;
  seq.ids.push_back(kBosToken);
  auto push_text = [&seq](std::string_view text) {
    for (unsigned char c : text) seq.ids.push_back(static_cast<int>(c));
  };
  push_text(system_prompt);
  seq.ids.push_back(kSepToken);
  for (size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) seq.ids.push_back('\n');
    push_text(docs[i]);
  }
  seq.ids.push_back(kSepToken);
  push_text(query);
  if (seq.size() > static_cast<size_t>(config_.context)) {
    throw Error(ErrorCode::OverLength, "assembled prompt of " + std::to_string(seq.size()) +
                                           " tokens exceeds context of " +
                                           std::to_string(config_.context));
  }
  return seq;
}

std::string ToyLm::generate(std::string_view system_prompt, std::string_view query,
                            std::span<const std::string> docs, int max_tokens) const {
  TokenSequence seq = assemble_prompt(system_prompt, query, docs);
  std::string out;
  for (int step = 0; step < max_tokens; ++step) {
    if (seq.size() >= static_cast<size_t>(config_.context)) break;
    ForwardCache cache;
    run_forward(seq, {}, &cache, nullptr);
    const double* lp = cache.logprobs.data() + (seq.size() - 1) * kVocabSize;
    int best = 0;
    for (int v = 1; v < kVocabSize; ++v) {
      if (lp[v] > lp[best]) best = v;
    }
    if (best == kEosToken) break;
    seq.ids.push_back(best);
    if (best < kByteVocab) out.push_back(static_cast<char>(best));
  }
  return out;
}

double ToyLm::cross_entropy(const TokenSequence& tokens) const {
  check_tokens(tokens);
  if (tokens.size() < 2) throw Error(ErrorCode::TooShort, "cross_entropy needs >= 2 tokens");
  ForwardCache cache;
  run_forward(tokens, {}, &cache, nullptr);
  const size_t T = tokens.size();
  double total = 0.0;
  for (size_t p = 0; p + 1 < T; ++p) {
    total -= cache.logprobs[p * kVocabSize + static_cast<size_t>(tokens.ids[p + 1])];
  }
  return total / static_cast<double>(T - 1);
}

BackwardResult ToyLm::backward(const TokenSequence& tokens, const BackwardRequest& request) {
  check_tokens(tokens);
  if (request.ce_weight != 0.0 && tokens.size() < 2) {
    throw Error(ErrorCode::TooShort, "cross_entropy gradient needs >= 2 tokens");
  }
  for (const TapGradient& tg : request.tap_grads) {
    if (tg.layer < 0 || tg.layer >= config_.layers) {
      throw Error(ErrorCode::BadLayer, "tap layer " + std::to_string(tg.layer));
    }
    if (tg.pooled_grad.size() != static_cast<size_t>(config_.width)) {
      throw Error(ErrorCode::WidthMismatch, "tap gradient width");
    }
  }

  const Layout layout(config_);
  const int d = config_.width;
  const int heads = config_.heads;
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const size_t T = tokens.size();
  const double* w = weights_.data();

  ForwardCache cache;
  run_forward(tokens, {}, &cache, nullptr);

  BackwardResult result;
  if (request.ce_weight != 0.0) {
    double total = 0.0;
    for (size_t p = 0; p + 1 < T; ++p) {
      total -= cache.logprobs[p * kVocabSize + static_cast<size_t>(tokens.ids[p + 1])];
    }
    result.cross_entropy = total / static_cast<double>(T - 1);
  }

  double* gw = nullptr;
  if (request.want_param_grads) {
    result.param_grads.assign(weights_.size(), 0.0);
    gw = result.param_grads.data();
  }
  auto gptr = [gw](size_t off) { return gw != nullptr ? gw + off : nullptr; };

  // dL/d logits, then back through the unembedding and final norm.
  std::vector<double> g_stream(T * static_cast<size_t>(d), 0.0);
  {
    std::vector<double> g_logits(static_cast<size_t>(kVocabSize));
    std::vector<double> g_lnf_row(static_cast<size_t>(d));
    const double ce_scale = request.ce_weight / static_cast<double>(T > 1 ? T - 1 : 1);
    for (size_t t = 0; t < T; ++t) {
      bool any = false;
      std::fill(g_logits.begin(), g_logits.end(), 0.0);
      if (request.ce_weight != 0.0 && t + 1 < T) {
        const double* lp = cache.logprobs.data() + t * kVocabSize;
        const int target = tokens.ids[t + 1];
        for (int v = 0; v < kVocabSize; ++v) {
          g_logits[static_cast<size_t>(v)] = ce_scale * std::exp(lp[v]);
        }
        g_logits[static_cast<size_t>(target)] -= ce_scale;
        any = true;
      }
      if (!any) continue;
      std::fill(g_lnf_row.begin(), g_lnf_row.end(), 0.0);
      linear_backward(w + layout.unembed, cache.lnf_out.data() + t * d, g_logits.data(),
                      gptr(layout.unembed), nullptr, g_lnf_row.data(), kVocabSize, d);
      layernorm_backward(cache.blocks.back().x_out.data() + t * d, w + layout.lnf_g,
                         cache.lnf_mean[t], cache.lnf_rstd[t], g_lnf_row.data(),
                         gptr(layout.lnf_g), gptr(layout.lnf_b), g_stream.data() + t * d, d);
    }
  }

  std::vector<double> g_post(T * static_cast<size_t>(d));
  std::vector<double> g_mid(T * static_cast<size_t>(d));
  std::vector<double> g_ln2(static_cast<size_t>(d));
  std::vector<double> g_act(static_cast<size_t>(4 * d));
  std::vector<double> g_pre(static_cast<size_t>(4 * d));
  std::vector<double> g_mix(T * static_cast<size_t>(d));
  std::vector<double> g_q(T * static_cast<size_t>(d));
  std::vector<double> g_k(T * static_cast<size_t>(d));
  std::vector<double> g_v(T * static_cast<size_t>(d));
  std::vector<double> g_ln1(static_cast<size_t>(d));

  for (int l = config_.layers - 1; l >= 0; --l) {
    const ForwardCache::Block& blk = cache.blocks[static_cast<size_t>(l)];
    const BlockOffsets& off = layout.blocks[static_cast<size_t>(l)];
    const std::vector<double>& x_in =
        l == 0 ? cache.x0 : cache.blocks[static_cast<size_t>(l) - 1].x_out;

    // Tapped-activation gradients enter at the block output.
    for (const TapGradient& tg : request.tap_grads) {
      if (tg.layer != l) continue;
      if (tg.pooling == Pooling::Mean) {
        const double inv = 1.0 / static_cast<double>(T);
        for (size_t t = 0; t < T; ++t) {
          double* row = g_stream.data() + t * d;
          for (int i = 0; i < d; ++i) row[i] += tg.pooled_grad[static_cast<size_t>(i)] * inv;
        }
      } else {
        double* row = g_stream.data() + (T - 1) * d;
        for (int i = 0; i < d; ++i) row[i] += tg.pooled_grad[static_cast<size_t>(i)];
      }
    }

    // Injection hooks: x_out = x_post + sum delta(x_post).
    const auto layer_hooks = hooks_at(l);
    if (layer_hooks.empty()) {
      g_post = g_stream;
    } else {
      g_post = g_stream;
      for (size_t t = 0; t < T; ++t) {
        const std::span<const double> hidden(blk.x_post.data() + t * d, static_cast<size_t>(d));
        const std::span<const double> g_out(g_stream.data() + t * d, static_cast<size_t>(d));
        std::span<double> g_in(g_post.data() + t * d, static_cast<size_t>(d));
        for (const auto& [handle, hook] : layer_hooks) {
          hook->backward(hidden, g_out, g_in);
        }
      }
    }

    // MLP sublayer.
    std::fill(g_mid.begin(), g_mid.end(), 0.0);
    for (size_t t = 0; t < T; ++t) {
      const double* g_row = g_post.data() + t * d;
      double* g_mid_row = g_mid.data() + t * d;
      for (int i = 0; i < d; ++i) g_mid_row[i] += g_row[i];
      std::fill(g_act.begin(), g_act.end(), 0.0);
      linear_backward(w + off.wproj, blk.fc_act.data() + t * 4 * d, g_row, gptr(off.wproj),
                      gptr(off.bproj), g_act.data(), d, 4 * d);
      const double* pre = blk.fc_pre.data() + t * 4 * d;
      for (int i = 0; i < 4 * d; ++i) g_pre[static_cast<size_t>(i)] = g_act[static_cast<size_t>(i)] * gelu_grad(pre[i]);
      std::fill(g_ln2.begin(), g_ln2.end(), 0.0);
      linear_backward(w + off.wfc, blk.ln2_out.data() + t * d, g_pre.data(), gptr(off.wfc),
                      gptr(off.bfc), g_ln2.data(), 4 * d, d);
      layernorm_backward(blk.x_mid.data() + t * d, w + off.ln2_g, blk.ln2_mean[t],
                         blk.ln2_rstd[t], g_ln2.data(), gptr(off.ln2_g), gptr(off.ln2_b),
                         g_mid_row, d);
    }

    // Attention sublayer.
    std::fill(g_stream.begin(), g_stream.end(), 0.0);
    std::fill(g_mix.begin(), g_mix.end(), 0.0);
    for (size_t t = 0; t < T; ++t) {
      const double* g_row = g_mid.data() + t * d;
      double* g_in_row = g_stream.data() + t * d;
      for (int i = 0; i < d; ++i) g_in_row[i] += g_row[i];
      linear_backward(w + off.wo, blk.att_mix.data() + t * d, g_row, gptr(off.wo), gptr(off.bo),
                      g_mix.data() + t * d, d, d);
    }
    std::fill(g_q.begin(), g_q.end(), 0.0);
    std::fill(g_k.begin(), g_k.end(), 0.0);
    std::fill(g_v.begin(), g_v.end(), 0.0);
    std::vector<double> g_att_row(T);
    for (int h = 0; h < heads; ++h) {
      const size_t head_off = static_cast<size_t>(h) * hd;
      const double* att_h = blk.att.data() + static_cast<size_t>(h) * T * T;
      for (size_t t = 0; t < T; ++t) {
        const double* att_row = att_h + t * T;
        const double* g_mix_row = g_mix.data() + t * d + head_off;
        double dot_sum = 0.0;
        for (size_t s = 0; s <= t; ++s) {
          const double* v_s = blk.v.data() + s * d + head_off;
          double g_a = 0.0;
          for (int i = 0; i < hd; ++i) g_a += g_mix_row[i] * v_s[i];
          g_att_row[s] = g_a;
          dot_sum += g_a * att_row[s];
          double* g_v_s = g_v.data() + s * d + head_off;
          const double a = att_row[s];
          for (int i = 0; i < hd; ++i) g_v_s[i] += a * g_mix_row[i];
        }
        const double* q_t = blk.q.data() + t * d + head_off;
        double* g_q_t = g_q.data() + t * d + head_off;
        for (size_t s = 0; s <= t; ++s) {
          const double g_logit = att_row[s] * (g_att_row[s] - dot_sum) * scale;
          const double* k_s = blk.k.data() + s * d + head_off;
          double* g_k_s = g_k.data() + s * d + head_off;
          for (int i = 0; i < hd; ++i) {
            g_q_t[i] += g_logit * k_s[i];
            g_k_s[i] += g_logit * q_t[i];
          }
        }
      }
    }
    for (size_t t = 0; t < T; ++t) {
      std::fill(g_ln1.begin(), g_ln1.end(), 0.0);
      const double* in = blk.ln1_out.data() + t * d;
      linear_backward(w + off.wq, in, g_q.data() + t * d, gptr(off.wq), gptr(off.bq), g_ln1.data(), d, d);
      linear_backward(w + off.wk, in, g_k.data() + t * d, gptr(off.wk), gptr(off.bk), g_ln1.data(), d, d);
      linear_backward(w + off.wv, in, g_v.data() + t * d, gptr(off.wv), gptr(off.bv), g_ln1.data(), d, d);
      layernorm_backward(x_in.data() + t * d, w + off.ln1_g, blk.ln1_mean[t], blk.ln1_rstd[t],
                         g_ln1.data(), gptr(off.ln1_g), gptr(off.ln1_b), g_stream.data() + t * d,
                         d);
    }
  }

  if (gw != nullptr) {
    for (size_t t = 0; t < T; ++t) {
      const double* g_row = g_stream.data() + t * d;
      double* g_tok = gw + layout.tok + static_cast<size_t>(tokens.ids[t]) * d;
      double* g_pos = gw + layout.pos + t * d;
      for (int i = 0; i < d; ++i) {
        g_tok[i] += g_row[i];
        g_pos[i] += g_row[i];
      }
    }
  }
  return result;
}

void ToyLm::save(std::ostream& out) const {
  out.write("RFLM", 4);
  write_u32(out, 1);
  write_u32(out, static_cast<uint32_t>(config_.layers));
  write_u32(out, static_cast<uint32_t>(config_.width));
  write_u32(out, static_cast<uint32_t>(config_.heads));
  write_u32(out, static_cast<uint32_t>(kVocabSize));
  write_u64(out, config_.seed);
  write_u32(out, static_cast<uint32_t>(config_.context));
  for (double v : weights_) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
  }
}

void ToyLm::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  save(out);
}

ToyLm ToyLm::load(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RFLM", 4) != 0) {
    throw Error(ErrorCode::ConfigInvalid, "not an RFLM model file");
  }
  const uint32_t version = read_u32(in);
  if (version != 1) throw Error(ErrorCode::ConfigInvalid, "unsupported RFLM version");
  ToyLmConfig config;
  config.layers = static_cast<int>(read_u32(in));
  config.width = static_cast<int>(read_u32(in));
  config.heads = static_cast<int>(read_u32(in));
  const uint32_t vocab = read_u32(in);
  if (vocab != kVocabSize) throw Error(ErrorCode::ConfigInvalid, "unexpected vocabulary size");
  config.seed = read_u64(in);
  config.context = static_cast<int>(read_u32(in));
  const Layout layout(config);
  std::vector<double> weights(layout.total);
  for (double& v : weights) {
    const uint64_t bits = read_u64(in);
    std::memcpy(&v, &bits, 8);
  }
  if (!in) throw Error(ErrorCode::IoError, "truncated RFLM model file");
  return ToyLm(config, std::move(weights));
}

ToyLm ToyLm::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return load(in);
}

ToyLm ToyLm::pretrained(const ToyLmConfig& config, std::span<const std::string> corpus,
                        const PretrainOptions& options) {
  if (corpus.empty()) throw Error(ErrorCode::EmptyBatch, "pretraining corpus is empty");
  std::vector<double> weights = ToyLm(config).weights();
  std::vector<double> m(weights.size(), 0.0);
  std::vector<double> v(weights.size(), 0.0);
  std::vector<double> grads(weights.size(), 0.0);
  Rng batch_rng(config.seed + 0x9E3779B97F4A7C15ull);
  const size_t max_text = static_cast<size_t>(config.context) - 2;

  for (size_t step = 0; step < options.steps; ++step) {
    ToyLm model(config, weights);
    std::fill(grads.begin(), grads.end(), 0.0);
    for (size_t b = 0; b < options.batch; ++b) {
      const std::string& raw = corpus[batch_rng.below(corpus.size())];
      const std::string_view text(raw.data(), std::min(raw.size(), max_text));
      const TokenSequence tokens = model.tokenize(text);
      BackwardRequest req;
      req.ce_weight = 1.0 / static_cast<double>(options.batch);
      req.want_param_grads = true;
      const BackwardResult r = model.backward(tokens, req);
      for (size_t i = 0; i < grads.size(); ++i) grads[i] += r.param_grads[i];
    }
    const double t = static_cast<double>(step + 1);
    const double bias1 = 1.0 - std::pow(options.beta1, t);
    const double bias2 = 1.0 - std::pow(options.beta2, t);
    for (size_t i = 0; i < weights.size(); ++i) {
      m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * grads[i];
      v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * grads[i] * grads[i];
      weights[i] -= options.learning_rate * (m[i] / bias1) /
                    (std::sqrt(v[i] / bias2) + options.adam_eps);
    }
  }
  return ToyLm(config, std::move(weights));
}

std::string ToyLm::fingerprint() const {
  std::call_once(fingerprint_once_, [this] {
    std::ostringstream buf(std::ios::binary);
    save(buf);
    const std::string bytes = buf.str();
    fingerprint_ = "rflm-" + to_hex(fnv1a64(bytes));
  });
  return fingerprint_;
}

}  // namespace ragfire
