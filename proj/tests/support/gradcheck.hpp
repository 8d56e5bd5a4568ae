#pragma once

// Finite-difference gradient checks shared by the unit tests and the
// acceptance binary.

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fedoap/calibration.hpp"
#include "fedoap/ops.hpp"
#include "fedoap/segnet.hpp"
#include "support/oracles.hpp"

namespace gradcheck {

using fedoap::Shape;
using fedoap::Tensor;
using fedoap::Var;

struct Options {
  std::uint64_t seed = 1;
  // Keep inputs away from kinks at zero.
  bool avoid_zero = false;
  std::size_t probes_per_input = 5;
  double h = 1e-6;
};

using Builder = std::function<Var(const std::vector<Var>&)>;

struct Case {
  std::string name;
  std::vector<Shape> shapes;
  Builder build;
  Options options;
};

struct Result {
  std::size_t trials = 0;
  std::size_t probes = 0;
  double max_error = 0.0;
  std::string worst;
};

inline void note(Result& r, double err, const std::string& where) {
  ++r.probes;
  if (err >= r.max_error) {
    r.max_error = err;
    r.worst = where;
  }
}

// Compares d/dx sum(r * f(x)), r a random projection, with central differences
// on random entries of every input.
inline Result run(const Case& c, std::size_t trials) {
  using namespace fedoap;
  Result result;
  Rng rng(c.options.seed ^ fnv1a(c.name));
  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::vector<Tensor> inputs;
    for (const Shape& s : c.shapes) {
      Tensor t = oracle::random_tensor(s, rng);
      if (c.options.avoid_zero)
        for (double& v : t.storage())
          while (std::abs(v) < 0.05) v = rng.uniform(-1, 1);
      inputs.push_back(std::move(t));
    }

    Tensor projection;
    auto evaluate = [&](const std::vector<Tensor>& values, std::vector<Tensor>* grads) {
      Tape tape;
      std::vector<Var> vars;
      for (const Tensor& v : values) vars.push_back(tape.variable(v));
      Var out = c.build(vars);
      if (projection.empty()) projection = oracle::random_tensor(out.value().shape(), rng);
      Var loss = ops::sum_reduce(ops::mul(out, tape.constant(projection)));
      if (grads) {
        const Gradients g = tape.backward(loss);
        for (const Var& v : vars) grads->push_back(g.of(v));
      }
      return loss.value().item();
    };

    std::vector<Tensor> analytic;
    evaluate(inputs, &analytic);
    for (std::size_t i = 0; i < inputs.size(); ++i)
      for (std::size_t p = 0; p < c.options.probes_per_input; ++p) {
        const std::size_t idx = rng.below(inputs[i].numel());
        std::vector<Tensor> shifted = inputs;
        shifted[i][idx] += c.options.h;
        const double up = evaluate(shifted, nullptr);
        shifted[i][idx] -= 2 * c.options.h;
        const double down = evaluate(shifted, nullptr);
        const double numeric = (up - down) / (2 * c.options.h);
        std::ostringstream where;
        where << c.name << " trial " << trial << " input " << i << "[" << idx << "] analytic " << analytic[i][idx]
              << " numeric " << numeric;
        note(result, oracle::rel_error(analytic[i][idx], numeric), where.str());
      }
    ++result.trials;
  }
  return result;
}

inline std::vector<Case> primitive_cases() {
  using namespace fedoap;
  std::vector<Case> cases = {
      {"add", {{2, 3, 4}, {3, 4}}, [](auto& v) { return ops::add(v[0], v[1]); }, {}},
      {"sub", {{4}, {2, 4}}, [](auto& v) { return ops::sub(v[0], v[1]); }, {}},
      {"mul", {{2, 3, 4}, {2, 3, 4}}, [](auto& v) { return ops::mul(v[0], v[1]); }, {}},
      {"mul_broadcast", {{3, 5}, {5}}, [](auto& v) { return ops::mul(v[0], v[1]); }, {}},
      {"scale", {{3, 3}}, [](auto& v) { return ops::scale(v[0], -1.7); }, {}},
      {"relu", {{4, 5}}, [](auto& v) { return ops::relu(v[0]); }, {.avoid_zero = true}},
      {"sigmoid", {{4, 5}}, [](auto& v) { return ops::sigmoid(ops::scale(v[0], 3.0)); }, {}},
      {"softmax", {{3, 6}}, [](auto& v) { return ops::softmax(ops::scale(v[0], 2.0)); }, {}},
      {"matmul", {{3, 4}, {4, 5}}, [](auto& v) { return ops::matmul(v[0], v[1]); }, {}},
      {"transpose", {{3, 4}}, [](auto& v) { return ops::transpose(v[0]); }, {}},
      {"conv2d_pad1", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, [](auto& v) { return ops::conv2d(v[0], v[1], v[2], {1, 1}); }, {}},
      {"conv2d_stride2",
       {{1, 3, 6, 6}, {2, 3, 3, 3}},
       [](auto& v) { return ops::conv2d(v[0], v[1], std::nullopt, {2, 0}); },
       {}},
      {"conv_transpose2d",
       {{2, 3, 3, 3}, {3, 2, 2, 2}, {2}},
       [](auto& v) { return ops::conv_transpose2d(v[0], v[1], v[2]); },
       {}},
      {"maxpool2d", {{2, 2, 4, 6}}, [](auto& v) { return ops::maxpool2d(v[0]); }, {}},
      {"group_norm", {{2, 4, 3, 3}, {4}, {4}}, [](auto& v) { return ops::group_norm(v[0], 2, v[1], v[2]); }, {}},
      {"instance_norm", {{2, 3, 4, 4}}, [](auto& v) { return ops::instance_norm(v[0]); }, {}},
      {"concat", {{2, 3, 2}, {2, 1, 2}}, [](auto& v) { return ops::concat({v[0], v[1]}, 1); }, {}},
      {"slice", {{3, 5}}, [](auto& v) { return ops::slice(v[0], 1, 1, 3); }, {}},
      {"reshape", {{2, 6}}, [](auto& v) { return ops::reshape(v[0], {3, 4}); }, {}},
      {"mean_reduce", {{3, 4}}, [](auto& v) { return ops::mean_reduce(v[0]); }, {}},
      {"sum_reduce", {{3, 4}}, [](auto& v) { return ops::sum_reduce(v[0]); }, {}},
  };

  // Fixed targets keep these pure functions of the probed logits.
  Rng target_rng(7);
  Tensor target({1, 1, 4, 4});
  for (double& v : target.storage()) v = target_rng.uniform(0, 1) < 0.4 ? 1.0 : 0.0;
  target[0] = 1.0;
  cases.push_back({"segmentation_loss",
                   {{1, 1, 4, 4}},
                   [target](auto& v) { return segmentation_loss(ops::scale(v[0], 3.0), target).total; },
                   {}});
  cases.push_back({"perturb_logits",
                   {{1, 1, 4, 4}},
                   [target](auto& v) {
                     Rng noise(3);
                     return perturb_logits(v[0], target, noise, 0.1);
                   },
                   {}});

  Rng kv_rng(11);
  const std::vector<KVTokens> foreign = {
      {oracle::random_tensor({3, 8}, kv_rng), oracle::random_tensor({3, 8}, kv_rng), 1, 0},
      {oracle::random_tensor({2, 8}, kv_rng), oracle::random_tensor({2, 8}, kv_rng), 2, 0}};
  cases.push_back({"dca_attention",
                   {{5, 8}, {4, 8}, {4, 8}},
                   [foreign](auto& v) { return dca_attention(v[0], LocalKV{v[1], v[2]}, foreign, 2); },
                   {}});
  return cases;
}

// Whole network plus the composite boundary loss, probing one random parameter
// coordinate per trial. The inconsistency mask is piecewise constant in the
// logits, so a probe only counts when the mask stays fixed across the stencil.
inline Result run_end_to_end(std::size_t trials, std::uint64_t seed = 21) {
  using namespace fedoap;
  const ModelConfig config{8, 1, 2, 1, 2};
  const ParameterStore params = init_model(config, 5);
  Rng rng(seed);
  const std::size_t d = config.bottleneck_dim();
  const std::vector<KVTokens> foreign = {{oracle::random_tensor({4, d}, rng), oracle::random_tensor({4, d}, rng), 1, 0}};
  std::vector<std::string> names;
  for (const auto& [name, p] : params) names.push_back(name);
  const PblConfig pbl{0.75, 0.3, 0.1};
  constexpr double h = 1e-6;

  Result result;
  std::size_t attempts = 0;
  while (result.trials < trials && attempts++ < 10 * trials) {
    const std::uint64_t noise_seed = rng.next_u64();
    const Tensor image = oracle::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
    Tensor target({2, 1, 8, 8});
    for (double& v : target.storage()) v = rng.uniform(0, 1) < 0.3 ? 1.0 : 0.0;
    const std::string name = names[rng.below(names.size())];
    const std::size_t index = rng.below(params.value(name).numel());

    auto loss_for = [&](const ParameterStore& p, Tensor& mask, Tensor* grad) {
      Tape tape;
      BoundParams bound = bind_params(tape, p);
      Var logits = forward(bound, tape.constant(image), foreign, config);
      mask = inconsistency_mask(target, logits.value(), pbl.tau);
      Rng noise(noise_seed);
      Var loss = composite_pbl_loss(logits, target, pbl, noise).composite;
      if (grad) *grad = tape.backward(loss).of(bound.at(name));
      return loss.value().item();
    };
    auto shifted = [&](double delta) {
      ParameterStore p;
      for (const auto& [n, e] : params) {
        Tensor v = e.value;
        if (n == name) v[index] += delta;
        p.insert(n, std::move(v), e.tag);
      }
      return p;
    };

    Tensor mask, mask_up, mask_down, grad;
    loss_for(params, mask, &grad);
    const double up = loss_for(shifted(h), mask_up, nullptr);
    const double down = loss_for(shifted(-h), mask_down, nullptr);
    if (!(mask_up == mask) || !(mask_down == mask)) continue;
    const double numeric = (up - down) / (2 * h);
    std::ostringstream where;
    where << name << "[" << index << "] analytic " << grad[index] << " numeric " << numeric;
    note(result, oracle::rel_error(grad[index], numeric), where.str());
    ++result.trials;
  }
  return result;
}

}  // namespace gradcheck
