#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "fedoap/params.hpp"

namespace fedoap {

struct AdamWConfig {
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Half-cosine decay from base_lr at step 0 to min_lr at step == total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, double min_lr);

struct AdamWState {
  AdamWConfig config;
  std::size_t step = 0;
  std::size_t total_steps = 1;
  NamedTensors first_moment;
  NamedTensors second_moment;

  AdamWState() = default;
  AdamWState(AdamWConfig cfg, std::size_t total) : config(cfg), total_steps(total) {}

  double current_lr() const { return cosine_lr(step, total_steps, config.base_lr, config.min_lr); }
};

using ParamFilter = std::function<bool(const std::string& name)>;

// One decoupled-weight-decay Adam update at lr = cosine_lr(state.step). Only
// parameters accepted by `trainable` (all, when empty) move; each of them must
// have an entry in `grads`.
void adamw_step(AdamWState& state, ParameterStore& params, const NamedTensors& grads,
                const ParamFilter& trainable = {});

}  // namespace fedoap
