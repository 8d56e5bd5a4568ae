#include "fedoap/optim.hpp"

#include <cmath>
#include <numbers>

#include "fedoap/error.hpp"

namespace fedoap {

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, double min_lr) {
  require(total_steps > 0, ErrorCode::StepOutOfRange, "cosine schedule needs total_steps > 0");
  require(step <= total_steps, ErrorCode::StepOutOfRange,
          "step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  const double progress = double(step) / double(total_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(AdamWState& state, ParameterStore& params, const NamedTensors& grads, const ParamFilter& trainable) {
  const AdamWConfig& cfg = state.config;
  const double lr = state.current_lr();
  const double t = double(state.step + 1);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);

  for (const auto& [name, param] : params) {
    if (trainable && !trainable(name)) continue;
    require(grads.count(name) != 0, ErrorCode::MissingGradient, "no gradient for " + name);
  }

  for (const auto& [name, param] : params) {
    if (trainable && !trainable(name)) continue;
    const Tensor& g = grads.at(name);
    Tensor& p = params.value(name);
    require(g.shape() == p.shape(), ErrorCode::ShapeMismatch, "gradient shape mismatch for " + name);
    auto [m_it, m_new] = state.first_moment.try_emplace(name, Tensor::zeros_like(p));
    auto [v_it, v_new] = state.second_moment.try_emplace(name, Tensor::zeros_like(p));
    double* m = m_it->second.data();
    double* v = v_it->second.data();
    double* pv = p.data();
    const double* gv = g.data();
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv[i] * gv[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      pv[i] = pv[i] * decay - lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
  ++state.step;
}

}  // namespace fedoap
