#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedoap/ops.hpp"
#include "fedoap/params.hpp"
#include "fedoap/tape.hpp"

namespace fedoap {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t in_channels = 1;
  std::size_t base_channels = 8;
  std::size_t depth = 3;
  std::size_t attention_heads = 4;

  // Channels at the deepest encoder level and in the attention bottleneck.
  std::size_t encoder_channels(std::size_t level) const { return base_channels << level; }
  std::size_t bottleneck_dim() const { return encoder_channels(depth) * 2; }
  std::size_t bottleneck_side() const { return image_size >> depth; }
  std::size_t tokens_per_sample() const { return bottleneck_side() * bottleneck_side(); }

  // Throws InvalidConfig.
  void validate() const;

  static ModelConfig desk_scale() { return {}; }
  static ModelConfig paper_scale() { return {128, 1, 64, 3, 4}; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ParamSpec {
  std::string name;
  Shape shape;
  PartitionTag tag = PartitionTag::Shared;
  std::size_t fan_in = 1;
  bool is_bias = false;
  // Normalization scale/shift start at exactly 1 and 0.
  std::optional<double> constant_init;
};

// Names, shapes and tags of every parameter the network owns, derived from the
// config alone (no allocation of values).
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

// Kaiming-uniform (fan-in) weights and PyTorch-style biases. Each tensor draws
// from its own stream seeded by (seed, name), so the store is a pure function
// of (config, seed).
ParameterStore init_model(const ModelConfig& config, std::uint64_t seed);

// Bottleneck key/value tokens a client publishes. Always detached values.
struct KVTokens {
  Tensor keys;    // [n_tokens, d]
  Tensor values;  // [n_tokens, d]
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;

  std::size_t n_tokens() const { return keys.dim(0); }
  std::size_t dim() const { return keys.dim(1); }
  std::size_t scalar_count() const { return keys.numel() + values.numel(); }

  friend bool operator==(const KVTokens&, const KVTokens&) = default;
};

struct ForwardOptions {
  bool use_adapter = true;
};

using BoundParams = std::map<std::string, Var>;

// Puts every parameter on `tape`; a parameter requires a gradient when
// `trainable` accepts its name (all of them when `trainable` is empty).
BoundParams bind_params(Tape& tape, const ParameterStore& params,
                        const std::function<bool(const std::string&)>& trainable = {});
// All parameters as constants (inference).
BoundParams bind_constants(Tape& tape, const ParameterStore& params);

struct LocalKV {
  Var keys;    // [n, d]
  Var values;  // [n, d]
};

// Multi-head scaled dot-product attention of `q` [n_q, d] over the keys/values
// formed by the live local tokens followed by the foreign tokens (ascending
// client_id). Foreign tokens enter the tape as constants, so gradients reach
// only `q` and `local`. Returns the heads concatenated, [n_q, d].
Var dca_attention(Var q, std::optional<LocalKV> local, std::span<const KVTokens> foreign, std::size_t heads);

// Per-head attention weights [heads, n_q, N] for inspection and tests.
Tensor dca_attention_weights(const Tensor& q, const Tensor& local_keys, std::span<const KVTokens> foreign,
                             std::size_t heads);

// Logits [B, 1, H, W] for batch [B, C, H, W].
Var forward(const BoundParams& params, Var batch, std::span<const KVTokens> foreign, const ModelConfig& config,
            const ForwardOptions& options = {});

// Inference convenience: evaluates in fixed chunks without recording gradients.
Tensor predict_logits(const ParameterStore& params, const Tensor& batch, std::span<const KVTokens> foreign,
                      const ModelConfig& config, const ForwardOptions& options = {});

// Encoder + key/value branch on an anchor batch [A, C, H, W]; the A samples'
// spatial positions are flattened row-major into A * (H / 2^depth)^2 tokens.
KVTokens compute_local_kv(const ParameterStore& params, const Tensor& anchor_batch, const ModelConfig& config,
                          std::uint32_t client_id = 0, std::uint32_t round = 0);

struct SplitParams {
  NamedTensors shared;
  NamedTensors personal;
};

SplitParams split_params(const ParameterStore& params);
// Rebuilds a store; tags come from `reference` (the store the halves came from).
ParameterStore merge_params(const SplitParams& halves, const ParameterStore& reference);

// Stacks the samples of `src` at `indices` along axis 0.
Tensor gather_samples(const Tensor& src, std::span<const std::size_t> indices);

}  // namespace fedoap
