#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ragfire/common.hpp"

namespace ragfire {

struct TokenSequence {
  std::vector<int> ids;

  size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

enum class Pooling { Mean, LastToken };

Pooling pooling_from_name(std::string_view name);
const char* pooling_name(Pooling p);

// Activations for the tapped layers of one forward pass. Each entry is a
// row-major [tokens x width] matrix of the residual stream after that block
// ran (injection hooks included).
struct LayerActivations {
  std::map<int, std::vector<double>> layers;
  size_t tokens = 0;
  size_t width = 0;

  std::span<const double> row(int layer, size_t token) const {
    return std::span<const double>(layers.at(layer)).subspan(token * width, width);
  }
};

struct ForwardResult {
  std::vector<double> logprobs;  // row-major [positions x vocab]
  size_t positions = 0;
  size_t vocab = 0;
  LayerActivations activations;

  std::span<const double> position_logprobs(size_t p) const {
    return std::span<const double>(logprobs).subspan(p * vocab, vocab);
  }
};

// An additive hidden-state hook: forward passes add delta(h) to every token's
// hidden state at the registered layer before the next block runs.
class InjectionHook {
 public:
  virtual ~InjectionHook() = default;

  // Writes the additive correction for one token's hidden state into `out`.
  virtual void delta(std::span<const double> hidden, std::span<double> out) const = 0;

  // Reverse-mode step for h' = h + delta(h). `g_out` is dL/dh'; implementations
  // add their Jacobian-transpose contribution into `g_hidden` and accumulate
  // parameter gradients internally. The default treats delta as constant in h,
  // which is exact for hooks with no dependence on the input.
  virtual void backward(std::span<const double> hidden, std::span<const double> g_out,
                        std::span<double> g_hidden) {
    (void)hidden;
    (void)g_out;
    (void)g_hidden;
  }
};

using HookFn = std::function<std::vector<double>(std::span<const double>)>;

class ActivationBackend {
 public:
  virtual ~ActivationBackend() = default;

  virtual TokenSequence tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(const TokenSequence& tokens) const = 0;
  virtual ForwardResult forward(const TokenSequence& tokens, std::span<const int> taps) const = 0;
  virtual std::string generate(std::string_view system_prompt, std::string_view query,
                               std::span<const std::string> docs, int max_tokens) const = 0;
  virtual double cross_entropy(const TokenSequence& tokens) const = 0;

  virtual uint64_t register_injection(int layer, std::shared_ptr<InjectionHook> hook) = 0;
  uint64_t register_injection(int layer, HookFn fn);
  virtual void remove_injection(uint64_t handle) = 0;

  virtual int layer_count() const = 0;
  virtual int width() const = 0;
  virtual int context_length() const = 0;
  virtual std::string fingerprint() const = 0;
};

// Removes its hook when it goes out of scope.
class ScopedInjection {
 public:
  ScopedInjection() = default;
  ScopedInjection(ActivationBackend* backend, uint64_t handle)
      : backend_(backend), handle_(handle) {}
  ScopedInjection(ScopedInjection&& other) noexcept { *this = std::move(other); }
  ScopedInjection& operator=(ScopedInjection&& other) noexcept {
    release();
    backend_ = other.backend_;
    handle_ = other.handle_;
    other.backend_ = nullptr;
    return *this;
  }
  ScopedInjection(const ScopedInjection&) = delete;
  ScopedInjection& operator=(const ScopedInjection&) = delete;
  ~ScopedInjection() { release(); }

  void release() {
    if (backend_ != nullptr) {
      backend_->remove_injection(handle_);
      backend_ = nullptr;
    }
  }

 private:
  ActivationBackend* backend_ = nullptr;
  uint64_t handle_ = 0;
};

// Gradient of a pooled tapped activation, to be expanded over token positions
// by the backend during its backward pass.
struct TapGradient {
  int layer = 0;
  Pooling pooling = Pooling::Mean;
  std::vector<double> pooled_grad;  // width-sized dL/d(pooled vector)
};

struct BackwardRequest {
  double ce_weight = 0.0;  // weight on mean next-token cross-entropy
  std::vector<TapGradient> tap_grads;
  bool want_param_grads = false;
};

struct BackwardResult {
  double cross_entropy = 0.0;        // populated when ce_weight != 0
  std::vector<double> param_grads;   // flat, same layout as the weight vector
};

// Optional capability: backends able to run reverse-mode differentiation of
// cross-entropy and tapped-activation objectives. Hook parameter gradients
// are accumulated through InjectionHook::backward.
class GradientBackend {
 public:
  virtual ~GradientBackend() = default;
  virtual BackwardResult backward(const TokenSequence& tokens, const BackwardRequest& request) = 0;
};

// Collapses the token rows of one tapped layer into a single width-d vector.
std::vector<double> pool(std::span<const double> rows, size_t tokens, size_t width,
                         Pooling strategy);

inline std::vector<double> pool(const LayerActivations& acts, int layer, Pooling strategy) {
  return pool(acts.layers.at(layer), acts.tokens, acts.width, strategy);
}

}  // namespace ragfire
