#include <gtest/gtest.h>

#include <set>

#include "fedoap/error.hpp"
#include "fedoap/segnet.hpp"
#include "support/oracles.hpp"

namespace {

using namespace fedoap;

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidArgument;
}

const ModelConfig kTiny{8, 1, 2, 1, 2};

TEST(DcaAttentionTest, MatchesMaterializedOracleOnRandomInstances) {
  Rng rng(201);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t heads = 1 + rng.below(4), d = heads * (1 + rng.below(4));
    const std::size_t n_q = 1 + rng.below(6), n_local = 1 + rng.below(6);
    const Tensor q = oracle::random_tensor({n_q, d}, rng, -2, 2);
    const Tensor lk = oracle::random_tensor({n_local, d}, rng, -2, 2);
    const Tensor lv = oracle::random_tensor({n_local, d}, rng, -2, 2);
    std::vector<KVTokens> foreign;
    for (std::uint32_t c = 1; c <= 2; ++c) {
      const std::size_t n = 1 + rng.below(5);
      foreign.push_back({oracle::random_tensor({n, d}, rng, -2, 2), oracle::random_tensor({n, d}, rng, -2, 2), c, 0});
    }
    Tape tape;
    Var out = dca_attention(tape.constant(q), LocalKV{tape.constant(lk), tape.constant(lv)}, foreign, heads);
    const Tensor keys = oracle::stack_rows({&lk, &foreign[0].keys, &foreign[1].keys});
    const Tensor values = oracle::stack_rows({&lv, &foreign[0].values, &foreign[1].values});
    EXPECT_LE(max_abs_diff(out.value(), oracle::attention(q, keys, values, heads)), 1e-10) << "trial " << trial;
  }
}

TEST(DcaAttentionTest, ReducesToSelfAttentionWithoutForeignTokens) {
  Rng rng(202);
  const Tensor x = oracle::random_tensor({6, 4}, rng);
  Tape tape;
  Var t = tape.constant(x);
  Var out = dca_attention(t, LocalKV{t, t}, {}, 1);
  EXPECT_LE(max_abs_diff(out.value(), oracle::attention(x, x, x, 1)), 1e-12);
}

TEST(DcaAttentionTest, IdenticalKeysAverageTheValues) {
  Rng rng(203);
  const Tensor q = oracle::random_tensor({1, 4}, rng);
  const Tensor keys({5, 4}, 0.3);
  const Tensor values = oracle::random_tensor({5, 4}, rng);
  Tape tape;
  Var out = dca_attention(tape.constant(q), LocalKV{tape.constant(keys), tape.constant(values)}, {}, 2);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < 5; ++i) mean += values[i * 4 + j] / 5.0;
    EXPECT_NEAR(out.value()[j], mean, 1e-12);
  }
}

TEST(DcaAttentionTest, WeightsSumToOneOverConcatenatedTokens) {
  Rng rng(204);
  const Tensor q = oracle::random_tensor({3, 8}, rng, -3, 3);
  const Tensor lk = oracle::random_tensor({4, 8}, rng, -3, 3);
  const std::vector<KVTokens> foreign = {
      {oracle::random_tensor({2, 8}, rng), oracle::random_tensor({2, 8}, rng), 1, 0},
      {oracle::random_tensor({5, 8}, rng), oracle::random_tensor({5, 8}, rng), 4, 0}};
  const Tensor w = dca_attention_weights(q, lk, foreign, 4);
  ASSERT_EQ(w.shape(), (Shape{4, 3, 11}));
  for (std::size_t row = 0; row < 12; ++row) {
    double s = 0;
    for (std::size_t j = 0; j < 11; ++j) s += w[row * 11 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(DcaAttentionTest, Errors) {
  Tape tape;
  Var q = tape.constant(Tensor({2, 4}, 0.1));
  Var bad = tape.constant(Tensor({3, 6}, 0.1));
  EXPECT_EQ(code_of([&] { dca_attention(q, std::nullopt, {}, 2); }), ErrorCode::EmptyKV);
  EXPECT_EQ(code_of([&] { dca_attention(q, LocalKV{bad, bad}, {}, 2); }), ErrorCode::DimMismatch);
  EXPECT_EQ(code_of([&] { dca_attention(q, LocalKV{q, q}, {}, 3); }), ErrorCode::DimMismatch);
  const std::vector<KVTokens> wrong_dim = {{Tensor({1, 6}), Tensor({1, 6}), 1, 0}};
  EXPECT_EQ(code_of([&] { dca_attention(q, LocalKV{q, q}, wrong_dim, 2); }), ErrorCode::DimMismatch);
}

TEST(SegnetTest, ParameterCounts) {
  const ParameterStore desk = init_model(ModelConfig::desk_scale(), 1);
  EXPECT_EQ(desk.scalar_count(), 483449u);
  std::size_t paper = 0, paper_personal = 0;
  for (const ParamSpec& s : parameter_specs(ModelConfig::paper_scale())) {
    paper += shape_numel(s.shape);
    if (is_personal(s.tag)) paper_personal += shape_numel(s.shape);
  }
  EXPECT_EQ(paper, 30847937u);
  EXPECT_EQ(paper_personal, 1123456u);
  // Four bytes per scalar lands inside the 120-140 MB band of the reported
  // per-round FedOAP overhead.
  EXPECT_GE(4.0 * double(paper) / 1e6, 120.0);
  EXPECT_LE(4.0 * double(paper) / 1e6, 140.0);
}

TEST(SegnetTest, PartitionTagsAreExactlyQueryAndAdapter) {
  const ParameterStore p = init_model(ModelConfig::desk_scale(), 3);
  std::size_t shared = 0, personal = 0;
  for (const auto& [name, param] : p) {
    const bool query = name.rfind("attention.query.", 0) == 0;
    const bool adapter = name.rfind("adapter.", 0) == 0;
    EXPECT_EQ(param.tag == PartitionTag::PersonalQuery, query) << name;
    EXPECT_EQ(param.tag == PartitionTag::PersonalAdapter, adapter) << name;
    (is_personal(param.tag) ? personal : shared) += param.value.numel();
  }
  EXPECT_EQ(shared + personal, p.scalar_count());
  EXPECT_EQ(personal, p.scalar_count(PartitionTag::PersonalQuery) + p.scalar_count(PartitionTag::PersonalAdapter));
}

TEST(SegnetTest, InitIsDeterministicAndSeedSensitive) {
  EXPECT_EQ(init_model(kTiny, 9), init_model(kTiny, 9));
  EXPECT_FALSE(init_model(kTiny, 9) == init_model(kTiny, 10));
  const ParameterStore p = init_model(kTiny, 9);
  for (double v : p.value("attention.norm.gamma").values()) EXPECT_EQ(v, 1.0);
  for (double v : p.value("attention.norm.beta").values()) EXPECT_EQ(v, 0.0);
}

TEST(SegnetTest, InvalidConfigs) {
  EXPECT_EQ(code_of([] { init_model({30, 1, 8, 3, 4}, 1); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { init_model({32, 1, 8, 3, 5}, 1); }), ErrorCode::InvalidConfig);
}

TEST(SegnetTest, SplitMergeRoundTrip) {
  const ParameterStore p = init_model(ModelConfig::desk_scale(), 4);
  const SplitParams halves = split_params(p);
  EXPECT_EQ(merge_params(halves, p), p);
  std::set<std::string> personal;
  for (const auto& [name, t] : halves.personal) personal.insert(name);
  std::set<std::string> expected;
  for (const auto& [name, param] : p)
    if (is_personal(param.tag)) expected.insert(name);
  EXPECT_EQ(personal, expected);
  EXPECT_EQ(halves.shared.size() + halves.personal.size(), p.size());
}

TEST(SegnetTest, ForwardShapeAndDeterminism) {
  const ModelConfig config = ModelConfig::desk_scale();
  const ParameterStore p = init_model(config, 5);
  Rng rng(6);
  const Tensor batch = oracle::random_tensor({3, 1, 32, 32}, rng, 0, 1);
  const Tensor a = predict_logits(p, batch, {}, config);
  EXPECT_EQ(a.shape(), (Shape{3, 1, 32, 32}));
  EXPECT_EQ(a, predict_logits(p, batch, {}, config));
  EXPECT_EQ(code_of([&] { predict_logits(p, Tensor({1, 1, 16, 16}), {}, config); }), ErrorCode::ShapeMismatch);
}

// Samples do not interact; GEMM blocking may differ in the last bits.
TEST(SegnetTest, BatchedForwardEqualsPerSample) {
  const ParameterStore p = init_model(kTiny, 5);
  Rng rng(7);
  const Tensor batch = oracle::random_tensor({2, 1, 8, 8}, rng, 0, 1);
  const Tensor both = predict_logits(p, batch, {}, kTiny);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t idx[] = {i};
    const Tensor one = predict_logits(p, gather_samples(batch, idx), {}, kTiny);
    for (std::size_t j = 0; j < one.numel(); ++j) EXPECT_NEAR(one[j], both[i * 64 + j], 1e-12);
  }
}

TEST(SegnetTest, KVTokenCountsAreLinearInAnchorSize) {
  const ModelConfig config = ModelConfig::desk_scale();
  const ParameterStore p = init_model(config, 8);
  Rng rng(9);
  const Tensor four = oracle::random_tensor({4, 1, 32, 32}, rng, 0, 1);
  const std::size_t first[] = {0};
  const KVTokens one = compute_local_kv(p, gather_samples(four, first), config);
  const KVTokens all = compute_local_kv(p, four, config, 2, 3);
  EXPECT_EQ(one.n_tokens(), 16u);
  EXPECT_EQ(all.n_tokens(), 64u);
  EXPECT_EQ(all.dim(), config.bottleneck_dim());
  EXPECT_EQ(all.values.shape(), all.keys.shape());
  EXPECT_EQ(all.client_id, 2u);
  EXPECT_EQ(all.round, 3u);
  EXPECT_EQ(all, compute_local_kv(p, four, config, 2, 3));
  // The first sample's tokens lead, row-major over the 4x4 grid.
  for (std::size_t i = 0; i < one.keys.numel(); ++i) EXPECT_EQ(one.keys[i], all.keys[i]);
}

TEST(SegnetTest, ForeignTokensShapeOutputButGetNoGradient) {
  const ParameterStore p = init_model(kTiny, 10);
  Rng rng(11);
  const Tensor batch = oracle::random_tensor({1, 1, 8, 8}, rng, 0, 1);
  const std::size_t d = kTiny.bottleneck_dim();
  std::vector<KVTokens> foreign = {{oracle::random_tensor({4, d}, rng), oracle::random_tensor({4, d}, rng), 1, 0}};

  Tape tape;
  BoundParams bound = bind_params(tape, p);
  const std::size_t before = tape.size();
  Var logits = forward(bound, tape.constant(batch), foreign, kTiny);
  std::size_t trainable_leaves = 0;
  for (std::uint32_t id = 0; id < tape.size(); ++id) {
    const Var v{&tape, id};
    if (tape.op(v) == "param") ++trainable_leaves;
    // Anything holding the foreign keys verbatim must be a constant.
    if (v.value() == foreign[0].keys || v.value() == foreign[0].values) EXPECT_FALSE(v.requires_grad());
  }
  EXPECT_EQ(trainable_leaves, p.size());
  EXPECT_GT(tape.size(), before);
  const Gradients g = tape.backward(ops::sum_reduce(logits));
  for (const auto& [name, var] : bound) EXPECT_TRUE(g.contains(var)) << name;

  std::vector<KVTokens> shifted = foreign;
  shifted[0].values[0] += 1.0;
  EXPECT_FALSE(predict_logits(p, batch, foreign, kTiny) == predict_logits(p, batch, shifted, kTiny));
}

TEST(SegnetTest, AdapterBypassIgnoresAdapterWeights) {
  ParameterStore p = init_model(kTiny, 12);
  Rng rng(13);
  const Tensor batch = oracle::random_tensor({1, 1, 8, 8}, rng, 0, 1);
  const Tensor bypassed = predict_logits(p, batch, {}, kTiny, {false});
  const Tensor active = predict_logits(p, batch, {}, kTiny, {true});
  p.value("adapter.conv1.weight")[0] += 0.5;
  EXPECT_EQ(predict_logits(p, batch, {}, kTiny, {false}), bypassed);
  EXPECT_FALSE(predict_logits(p, batch, {}, kTiny, {true}) == active);
}

}  // namespace
