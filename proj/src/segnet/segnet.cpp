#include "fedoap/segnet.hpp"

#include <algorithm>
#include <cmath>

#include "fedoap/error.hpp"
#include "fedoap/rng.hpp"

namespace fedoap {
namespace {

class SpecBuilder {
 public:
  void conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
            PartitionTag tag = PartitionTag::Shared) {
    const std::size_t fan_in = in * k * k;
    specs_.push_back({name + ".weight", {out, in, k, k}, tag, fan_in, false, std::nullopt});
    specs_.push_back({name + ".bias", {out}, tag, fan_in, true, std::nullopt});
  }
  // Weight layout [in, out, 2, 2]; every output pixel sees `in` inputs.
  void upsample(const std::string& name, std::size_t in, std::size_t out) {
    specs_.push_back({name + ".weight", {in, out, 2, 2}, PartitionTag::Shared, in, false, std::nullopt});
    specs_.push_back({name + ".bias", {out}, PartitionTag::Shared, in, true, std::nullopt});
  }
  void double_conv(const std::string& name, std::size_t in, std::size_t out) {
    conv(name + ".conv1", in, out, 3);
    conv(name + ".conv2", out, out, 3);
  }
  void norm(const std::string& name, std::size_t channels) {
    specs_.push_back({name + ".gamma", {channels}, PartitionTag::Shared, 1, false, 1.0});
    specs_.push_back({name + ".beta", {channels}, PartitionTag::Shared, 1, false, 0.0});
  }
  std::vector<ParamSpec> take() { return std::move(specs_); }

 private:
  std::vector<ParamSpec> specs_;
};

std::string level_name(const char* prefix, std::size_t level) { return prefix + std::to_string(level); }

const Var& param(const BoundParams& p, const std::string& name) {
  auto it = p.find(name);
  require(it != p.end(), ErrorCode::InvalidArgument, "parameter " + name + " missing from bound set");
  return it->second;
}

Var conv(const BoundParams& p, const std::string& name, Var x, std::size_t padding) {
  return ops::conv2d(x, param(p, name + ".weight"), param(p, name + ".bias"), {1, padding});
}

Var conv_norm_relu(const BoundParams& p, const std::string& name, Var x) {
  return ops::relu(ops::instance_norm(conv(p, name, x, 1)));
}

Var double_conv(const BoundParams& p, const std::string& name, Var x) {
  return conv_norm_relu(p, name + ".conv2", conv_norm_relu(p, name + ".conv1", x));
}

// [1, d, h, w] sample map -> [h*w, d] tokens (row-major positions).
Var to_tokens(Var sample_map, std::size_t d, std::size_t positions) {
  return ops::transpose(ops::reshape(sample_map, {d, positions}));
}

Var from_tokens(Var tokens, std::size_t d, std::size_t side) {
  return ops::reshape(ops::transpose(tokens), {1, d, side, side});
}

struct Encoded {
  std::vector<Var> levels;
  Var bottom;
};

Encoded encode(const BoundParams& p, Var batch, const ModelConfig& config) {
  Encoded e;
  e.levels.push_back(double_conv(p, "enc0", batch));
  for (std::size_t level = 1; level <= config.depth; ++level)
    e.levels.push_back(double_conv(p, level_name("enc", level), ops::maxpool2d(e.levels.back())));
  e.bottom = e.levels.back();
  return e;
}

Var kv_branch(const BoundParams& p, Var bottom) { return conv_norm_relu(p, "bottleneck.kv_branch", bottom); }

void check_batch(const Tensor& batch, const ModelConfig& config) {
  const Shape expected{batch.rank() == 4 ? batch.dim(0) : 0, config.in_channels, config.image_size, config.image_size};
  require(batch.rank() == 4 && batch.shape() == expected, ErrorCode::ShapeMismatch,
          "batch " + shape_to_string(batch.shape()) + " does not match [B, " + std::to_string(config.in_channels) +
              ", " + std::to_string(config.image_size) + ", " + std::to_string(config.image_size) + "]");
}

void check_foreign(std::span<const KVTokens> foreign, std::size_t d) {
  for (std::size_t i = 0; i < foreign.size(); ++i) {
    const KVTokens& kv = foreign[i];
    require(kv.keys.rank() == 2 && kv.values.shape() == kv.keys.shape(), ErrorCode::DimMismatch,
            "foreign tokens from client " + std::to_string(kv.client_id) + " have inconsistent key/value shapes");
    require(kv.dim() == d, ErrorCode::DimMismatch,
            "foreign token dim " + std::to_string(kv.dim()) + " != " + std::to_string(d));
    if (i > 0)
      require(foreign[i - 1].client_id < kv.client_id, ErrorCode::InvalidArgument,
              "foreign tokens must be sorted by ascending client id");
  }
}

std::pair<Tensor, Tensor> stack_foreign(std::span<const KVTokens> foreign) {
  std::size_t rows = 0;
  for (const auto& kv : foreign) rows += kv.n_tokens();
  const std::size_t d = foreign.front().dim();
  Tensor keys({rows, d}), values({rows, d});
  std::size_t off = 0;
  for (const auto& kv : foreign) {
    std::copy(kv.keys.storage().begin(), kv.keys.storage().end(), keys.data() + off);
    std::copy(kv.values.storage().begin(), kv.values.storage().end(), values.data() + off);
    off += kv.keys.numel();
  }
  return {std::move(keys), std::move(values)};
}

Var multi_head(Var q, Var keys, Var values, std::size_t heads) {
  const std::size_t d = q.value().dim(1);
  const std::size_t head_dim = d / heads;
  const double inv_scale = 1.0 / std::sqrt(double(head_dim));
  if (heads == 1) return ops::matmul(ops::softmax(ops::scale(ops::matmul(q, ops::transpose(keys)), inv_scale)), values);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ops::slice(q, 1, h * head_dim, head_dim);
    Var kh = ops::slice(keys, 1, h * head_dim, head_dim);
    Var vh = ops::slice(values, 1, h * head_dim, head_dim);
    Var w = ops::softmax(ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_scale));
    outs.push_back(ops::matmul(w, vh));
  }
  return ops::concat(outs, 1);
}

// Attention over pre-stacked foreign constants; avoids re-copying them for
// every sample of a batch.
Var attend(Var q, std::optional<LocalKV> local, std::optional<std::pair<Var, Var>> foreign, std::size_t heads) {
  Var keys, values;
  if (local && foreign) {
    keys = ops::concat({local->keys, foreign->first}, 0);
    values = ops::concat({local->values, foreign->second}, 0);
  } else if (local) {
    keys = local->keys;
    values = local->values;
  } else if (foreign) {
    keys = foreign->first;
    values = foreign->second;
  } else {
    fail(ErrorCode::EmptyKV, "attention needs local or foreign tokens");
  }
  return multi_head(q, keys, values, heads);
}

}  // namespace

void ModelConfig::validate() const {
  require(image_size > 0 && in_channels > 0 && base_channels > 0 && depth > 0 && attention_heads > 0,
          ErrorCode::InvalidConfig, "model config extents must be positive");
  require(depth < 16 && image_size % (std::size_t{1} << depth) == 0, ErrorCode::InvalidConfig,
          "image_size " + std::to_string(image_size) + " not divisible by 2^" + std::to_string(depth));
  require(bottleneck_dim() % attention_heads == 0, ErrorCode::InvalidConfig,
          "bottleneck_dim " + std::to_string(bottleneck_dim()) + " not divisible by " +
              std::to_string(attention_heads) + " heads");
}

std::vector<ParamSpec> parameter_specs(const ModelConfig& config) {
  config.validate();
  SpecBuilder b;
  const std::size_t d = config.bottleneck_dim();
  const std::size_t deepest = config.encoder_channels(config.depth);

  b.double_conv("enc0", config.in_channels, config.encoder_channels(0));
  for (std::size_t level = 1; level <= config.depth; ++level)
    b.double_conv(level_name("enc", level), config.encoder_channels(level - 1), config.encoder_channels(level));

  b.conv("bottleneck.query_branch", deepest, d, 3);
  b.conv("bottleneck.kv_branch", deepest, d, 3);
  b.conv("attention.query", d, d, 1, PartitionTag::PersonalQuery);
  b.conv("attention.key", d, d, 1);
  b.conv("attention.value", d, d, 1);
  b.conv("attention.out", d, d, 1);
  b.norm("attention.norm", d);

  b.double_conv("decoder.fuse", d + deepest, deepest);
  for (std::size_t level = config.depth; level >= 1; --level) {
    const std::string name = level_name("decoder.up", level);
    const std::size_t in = config.encoder_channels(level), out = config.encoder_channels(level - 1);
    b.upsample(name + ".upsample", in, out);
    b.double_conv(name, 2 * out, out);
  }

  const std::size_t top = config.encoder_channels(0);
  b.conv("adapter.conv1", top, top, 3, PartitionTag::PersonalAdapter);
  b.conv("adapter.conv2", top, top, 3, PartitionTag::PersonalAdapter);
  b.conv("head", top, 1, 1);
  return b.take();
}

ParameterStore init_model(const ModelConfig& config, std::uint64_t seed) {
  ParameterStore store;
  for (const ParamSpec& spec : parameter_specs(config)) {
    Tensor t(spec.shape);
    if (spec.constant_init) {
      std::fill(t.storage().begin(), t.storage().end(), *spec.constant_init);
    } else {
      Rng rng(derive_seed(seed, fnv1a(spec.name)));
      const double bound = spec.is_bias ? 1.0 / std::sqrt(double(spec.fan_in)) : std::sqrt(6.0 / double(spec.fan_in));
      for (double& v : t.storage()) v = rng.uniform(-bound, bound);
    }
    store.insert(spec.name, std::move(t), spec.tag);
  }
  return store;
}

BoundParams bind_params(Tape& tape, const ParameterStore& params,
                        const std::function<bool(const std::string&)>& trainable) {
  BoundParams bound;
  for (const auto& [name, p] : params) bound.emplace(name, tape.variable(p.value, !trainable || trainable(name)));
  return bound;
}

BoundParams bind_constants(Tape& tape, const ParameterStore& params) {
  BoundParams bound;
  for (const auto& [name, p] : params) bound.emplace(name, tape.constant(p.value));
  return bound;
}

Var dca_attention(Var q, std::optional<LocalKV> local, std::span<const KVTokens> foreign, std::size_t heads) {
  const Tensor& qv = q.value();
  require(qv.rank() == 2, ErrorCode::DimMismatch, "queries must be [n_q, d]");
  const std::size_t d = qv.dim(1);
  require(heads >= 1 && d % heads == 0, ErrorCode::DimMismatch,
          "dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (local) {
    const Tensor& kv = local->keys.value();
    require(kv.rank() == 2 && kv.dim(1) == d && local->values.value().shape() == kv.shape(), ErrorCode::DimMismatch,
            "local keys/values must be [n, " + std::to_string(d) + "]");
  }
  check_foreign(foreign, d);
  std::optional<std::pair<Var, Var>> foreign_vars;
  if (!foreign.empty()) {
    auto [keys, values] = stack_foreign(foreign);
    foreign_vars.emplace(q.tape->constant(std::move(keys)), q.tape->constant(std::move(values)));
  }
  return attend(q, local, foreign_vars, heads);
}

Tensor dca_attention_weights(const Tensor& q, const Tensor& local_keys, std::span<const KVTokens> foreign,
                             std::size_t heads) {
  Tape tape;
  Var qv = tape.constant(q);
  Var keys = tape.constant(local_keys);
  check_foreign(foreign, q.dim(1));
  if (!foreign.empty()) keys = ops::concat({keys, tape.constant(stack_foreign(foreign).first)}, 0);
  const std::size_t d = q.dim(1), head_dim = d / heads, n_q = q.dim(0), n_k = keys.value().dim(0);
  Tensor out({heads, n_q, n_k});
  for (std::size_t h = 0; h < heads; ++h) {
    Var w = ops::softmax(ops::scale(
        ops::matmul(ops::slice(qv, 1, h * head_dim, head_dim), ops::transpose(ops::slice(keys, 1, h * head_dim, head_dim))),
        1.0 / std::sqrt(double(head_dim))));
    std::copy(w.value().storage().begin(), w.value().storage().end(), out.data() + h * n_q * n_k);
  }
  return out;
}

Var forward(const BoundParams& p, Var batch, std::span<const KVTokens> foreign, const ModelConfig& config,
            const ForwardOptions& options) {
  config.validate();
  check_batch(batch.value(), config);
  const std::size_t d = config.bottleneck_dim();
  const std::size_t side = config.bottleneck_side();
  const std::size_t positions = side * side;
  check_foreign(foreign, d);

  Encoded enc = encode(p, batch, config);
  Var query_map = conv_norm_relu(p, "bottleneck.query_branch", enc.bottom);
  Var kv_map = kv_branch(p, enc.bottom);
  Var q = conv(p, "attention.query", query_map, 0);
  Var k = conv(p, "attention.key", kv_map, 0);
  Var v = conv(p, "attention.value", kv_map, 0);

  std::optional<std::pair<Var, Var>> foreign_vars;
  if (!foreign.empty()) {
    auto [keys, values] = stack_foreign(foreign);
    foreign_vars.emplace(batch.tape->constant(std::move(keys)), batch.tape->constant(std::move(values)));
  }

  const std::size_t n = batch.value().dim(0);
  std::vector<Var> attended;
  attended.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Var qi = to_tokens(ops::slice(q, 0, i, 1), d, positions);
    LocalKV local{to_tokens(ops::slice(k, 0, i, 1), d, positions), to_tokens(ops::slice(v, 0, i, 1), d, positions)};
    attended.push_back(from_tokens(attend(qi, local, foreign_vars, config.attention_heads), d, side));
  }
  Var attn = n == 1 ? attended.front() : ops::concat(attended, 0);
  Var projected = conv(p, "attention.out", attn, 0);
  Var normed = ops::group_norm(projected, config.attention_heads, param(p, "attention.norm.gamma"),
                               param(p, "attention.norm.beta"));
  Var bottleneck = ops::add(query_map, normed);

  Var y = double_conv(p, "decoder.fuse", ops::concat({bottleneck, enc.bottom}, 1));
  for (std::size_t level = config.depth; level >= 1; --level) {
    const std::string name = level_name("decoder.up", level);
    Var up = ops::conv_transpose2d(y, param(p, name + ".upsample.weight"), param(p, name + ".upsample.bias"));
    y = double_conv(p, name, ops::concat({up, enc.levels[level - 1]}, 1));
  }
  if (options.use_adapter) {
    Var refined = conv(p, "adapter.conv2", ops::relu(conv(p, "adapter.conv1", y, 1)), 1);
    y = ops::add(y, refined);
  }
  return conv(p, "head", y, 0);
}

Tensor predict_logits(const ParameterStore& params, const Tensor& batch, std::span<const KVTokens> foreign,
                      const ModelConfig& config, const ForwardOptions& options) {
  check_batch(batch, config);
  constexpr std::size_t kChunk = 16;
  const std::size_t n = batch.dim(0);
  Tensor out({n, 1, config.image_size, config.image_size});
  const std::size_t per_sample = config.image_size * config.image_size;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t count = std::min(kChunk, n - start);
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
    Tape tape;
    BoundParams bound = bind_constants(tape, params);
    Var logits = forward(bound, tape.constant(gather_samples(batch, idx)), foreign, config, options);
    std::copy(logits.value().storage().begin(), logits.value().storage().end(), out.data() + start * per_sample);
  }
  return out;
}

KVTokens compute_local_kv(const ParameterStore& params, const Tensor& anchor_batch, const ModelConfig& config,
                          std::uint32_t client_id, std::uint32_t round) {
  config.validate();
  check_batch(anchor_batch, config);
  const std::size_t d = config.bottleneck_dim();
  const std::size_t positions = config.tokens_per_sample();
  Tape tape;
  BoundParams p = bind_constants(tape, params);
  Encoded enc = encode(p, tape.constant(anchor_batch), config);
  Var kv_map = kv_branch(p, enc.bottom);
  Var k = conv(p, "attention.key", kv_map, 0);
  Var v = conv(p, "attention.value", kv_map, 0);
  const std::size_t a = anchor_batch.dim(0);
  std::vector<Var> keys, values;
  for (std::size_t i = 0; i < a; ++i) {
    keys.push_back(to_tokens(ops::slice(k, 0, i, 1), d, positions));
    values.push_back(to_tokens(ops::slice(v, 0, i, 1), d, positions));
  }
  KVTokens out;
  out.keys = ops::concat(keys, 0).value();
  out.values = ops::concat(values, 0).value();
  out.client_id = client_id;
  out.round = round;
  return out;
}

SplitParams split_params(const ParameterStore& params) {
  SplitParams halves;
  for (const auto& [name, p] : params) (is_personal(p.tag) ? halves.personal : halves.shared).emplace(name, p.value);
  return halves;
}

ParameterStore merge_params(const SplitParams& halves, const ParameterStore& reference) {
  ParameterStore out;
  for (const auto& [name, p] : reference) {
    const NamedTensors& side = is_personal(p.tag) ? halves.personal : halves.shared;
    auto it = side.find(name);
    require(it != side.end(), ErrorCode::NameSetMismatch, "merge is missing parameter " + name);
    require(it->second.shape() == p.value.shape(), ErrorCode::ShapeMismatch, "merge shape mismatch for " + name);
    out.insert(name, it->second, p.tag);
  }
  require(halves.shared.size() + halves.personal.size() == reference.size(), ErrorCode::NameSetMismatch,
          "merge halves carry names unknown to the reference store");
  return out;
}

Tensor gather_samples(const Tensor& src, std::span<const std::size_t> indices) {
  require(src.rank() >= 1 && !indices.empty(), ErrorCode::ShapeMismatch, "gather_samples needs a batch and indices");
  Shape shape = src.shape();
  const std::size_t per = src.numel() / shape[0];
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < src.dim(0), ErrorCode::ShapeMismatch, "gather index out of range");
    std::copy_n(src.data() + indices[i] * per, per, out.data() + i * per);
  }
  return out;
}

}  // namespace fedoap
