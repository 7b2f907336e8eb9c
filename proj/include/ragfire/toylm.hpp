#pragma once

#include <iosfwd>
#include <mutex>
#include <shared_mutex>

#include "ragfire/backend.hpp"

namespace ragfire {

// Byte-level vocabulary: 256 byte values plus four specials.
inline constexpr int kByteVocab = 256;
inline constexpr int kPadToken = 256;
inline constexpr int kBosToken = 257;
inline constexpr int kEosToken = 258;
inline constexpr int kSepToken = 259;
inline constexpr int kVocabSize = 260;

struct ToyLmConfig {
  int layers = 4;
  int width = 64;
  int heads = 4;
  int context = 256;
  uint64_t seed = 1;
};

// Built-in pre-fit pass: Adam on next-token cross-entropy over a text corpus,
// batches drawn from a generator seeded off the model seed. Fitting the
// backend to the deployment's benign corpus tightens its activation zones;
// everything stays bit-deterministic.
struct PretrainOptions {
  size_t steps = 300;
  size_t batch = 8;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

// A small pre-norm decoder-only transformer in 64-bit floats with per-layer
// activation taps and additive hidden-state injection hooks. Weights are
// drawn from a fixed-seed generator and immutable after construction; every
// entry point is bit-deterministic in (weights, input, taps, hooks).
class ToyLm : public ActivationBackend, public GradientBackend {
 public:
  explicit ToyLm(const ToyLmConfig& config);
  ToyLm(const ToyLmConfig& config, std::vector<double> weights);
  ToyLm(ToyLm&& other) noexcept;
  ToyLm(const ToyLm&) = delete;
  ToyLm& operator=(const ToyLm&) = delete;
  ToyLm& operator=(ToyLm&&) = delete;

  static ToyLm pretrained(const ToyLmConfig& config, std::span<const std::string> corpus,
                          const PretrainOptions& options = {});

  TokenSequence tokenize(std::string_view text) const override;
  std::string detokenize(const TokenSequence& tokens) const override;
  ForwardResult forward(const TokenSequence& tokens, std::span<const int> taps) const override;
  std::string generate(std::string_view system_prompt, std::string_view query,
                       std::span<const std::string> docs, int max_tokens) const override;
  double cross_entropy(const TokenSequence& tokens) const override;

  using ActivationBackend::register_injection;
  uint64_t register_injection(int layer, std::shared_ptr<InjectionHook> hook) override;
  void remove_injection(uint64_t handle) override;

  BackwardResult backward(const TokenSequence& tokens, const BackwardRequest& request) override;

  int layer_count() const override { return config_.layers; }
  int width() const override { return config_.width; }
  int context_length() const override { return config_.context; }
  std::string fingerprint() const override;

  const ToyLmConfig& config() const { return config_; }
  const std::vector<double>& weights() const { return weights_; }
  size_t parameter_count() const { return weights_.size(); }

  // Prompt assembly used by generate: BOS, system prompt, SEP, documents
  // joined by newlines, SEP, query. Throws OverLength when it cannot fit
  // within the context window.
  TokenSequence assemble_prompt(std::string_view system_prompt, std::string_view query,
                                std::span<const std::string> docs) const;

  void save(std::ostream& out) const;
  void save_file(const std::string& path) const;
  static ToyLm load(std::istream& in);
  static ToyLm load_file(const std::string& path);

 private:
  struct ForwardCache;

  void check_tokens(const TokenSequence& tokens) const;
  void run_forward(const TokenSequence& tokens, std::span<const int> taps, ForwardCache* cache,
                   ForwardResult* result) const;
  std::vector<std::pair<uint64_t, std::shared_ptr<InjectionHook>>> hooks_at(int layer) const;

  ToyLmConfig config_;
  std::vector<double> weights_;

  mutable std::shared_mutex hook_mutex_;
  std::map<int, std::vector<std::pair<uint64_t, std::shared_ptr<InjectionHook>>>> hooks_;
  uint64_t next_handle_ = 1;

  mutable std::once_flag fingerprint_once_;
  mutable std::string fingerprint_;
};

}  // namespace ragfire
