#include <cmath>

#include "fedoap/calibration.hpp"
#include "fedoap/error.hpp"
#include "fedoap/ops.hpp"

namespace fedoap {
namespace {

using Grads = std::span<Tensor* const>;

double stable_sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

void check_pair(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          std::string(op) + ": " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
}

bool is_binary(const Tensor& t) {
  for (double v : t.values())
    if (v != 0.0 && v != 1.0) return false;
  return true;
}

Var bce_with_logits(Var logits, const Tensor& target) {
  const Tensor& x = logits.value();
  double total = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    total += std::max(x[i], 0.0) - x[i] * target[i] + std::log1p(std::exp(-std::abs(x[i])));
  const double inv_n = 1.0 / double(x.numel());
  return logits.tape->record("bce_with_logits", Tensor::scalar(total * inv_n), {logits},
                             [logits, target, inv_n](const Tape& t, const Tensor&, const Tensor& g, Grads gi) {
                               const Tensor& x = t.value(logits);
                               double* d = gi[0]->data();
                               for (std::size_t i = 0; i < x.numel(); ++i)
                                 d[i] += g[0] * inv_n * (stable_sigmoid(x[i]) - target[i]);
                             });
}

Var soft_dice_loss(Var logits, const Tensor& target) {
  const Tensor& x = logits.value();
  Tensor prob(x.shape());
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    prob[i] = stable_sigmoid(x[i]);
    inter += prob[i] * target[i];
    sum_p += prob[i];
    sum_y += target[i];
  }
  const double num = 2.0 * inter + kDiceSmoothing;
  const double den = sum_p + sum_y + kDiceSmoothing;
  return logits.tape->record(
      "soft_dice_loss", Tensor::scalar(1.0 - num / den), {logits},
      [prob = std::move(prob), target, num, den](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
        double* d = gi[0]->data();
        const double den2 = den * den;
        for (std::size_t i = 0; i < prob.numel(); ++i) {
          const double dl_dp = -(2.0 * target[i] * den - num) / den2;
          d[i] += g[0] * dl_dp * prob[i] * (1.0 - prob[i]);
        }
      });
}

}  // namespace

void PblConfig::validate() const {
  require(tau > 0.0 && tau < 1.0, ErrorCode::InvalidConfig, "tau must lie in (0, 1)");
  require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::InvalidConfig, "lambda must lie in [0, 1]");
  require(noise_variance >= 0.0, ErrorCode::InvalidConfig, "noise variance must be >= 0");
}

SegLoss segmentation_loss(Var logits, const Tensor& target) {
  check_pair(logits.value(), target, "segmentation_loss");
  require(is_binary(target), ErrorCode::NonBinaryTarget, "segmentation target must be {0,1}-valued");
  SegLoss loss;
  loss.bce = bce_with_logits(logits, target);
  loss.dice = soft_dice_loss(logits, target);
  loss.total = ops::add(ops::scale(loss.bce, 0.5), loss.dice);
  return loss;
}

Tensor inconsistency_mask(const Tensor& target, const Tensor& logits, double tau) {
  check_pair(target, logits, "inconsistency_mask");
  require(is_binary(target), ErrorCode::NonBinaryTarget, "inconsistency target must be {0,1}-valued");
  Tensor delta(target.shape());
  for (std::size_t i = 0; i < target.numel(); ++i)
    delta[i] = std::abs(target[i] - stable_sigmoid(logits[i])) > tau ? 1.0 : 0.0;
  return delta;
}

Var perturb_logits(Var logits, const Tensor& delta, Rng& rng, double variance) {
  check_pair(logits.value(), delta, "perturb_logits");
  require(variance >= 0.0, ErrorCode::NegativeVariance, "perturbation variance must be >= 0");
  Tensor out = logits.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (delta[i] != 1.0) continue;
    const double eps = rng.gaussian(0.0, variance);
    if (eps != 0.0) out[i] += eps;
  }
  return logits.tape->record("perturb", std::move(out), {logits},
                             [](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
                               double* d = gi[0]->data();
                               for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
                             });
}

PblLoss composite_pbl_loss(Var logits, const Tensor& target, const PblConfig& cfg, Rng& rng) {
  cfg.validate();
  SegLoss clean = segmentation_loss(logits, target);
  const Tensor delta = inconsistency_mask(target, logits.value(), cfg.tau);
  SegLoss noisy = segmentation_loss(perturb_logits(logits, delta, rng, cfg.noise_variance), target);

  PblLoss out;
  out.composite = ops::add(ops::scale(clean.total, 1.0 - cfg.lambda), ops::scale(noisy.total, cfg.lambda));
  out.breakdown.seg_loss = clean.total.value().item();
  out.breakdown.perturbed_loss = noisy.total.value().item();
  out.breakdown.composite = out.composite.value().item();
  out.breakdown.bce = clean.bce.value().item();
  out.breakdown.dice_term = clean.dice.value().item();
  return out;
}

Tensor binarize_logits(const Tensor& logits) {
  Tensor mask(logits.shape());
  for (std::size_t i = 0; i < logits.numel(); ++i) mask[i] = logits[i] > 0.0 ? 1.0 : 0.0;
  return mask;
}

double dice_score(const Tensor& pred_mask, const Tensor& target_mask) {
  check_pair(pred_mask, target_mask, "dice_score");
  require(is_binary(pred_mask) && is_binary(target_mask), ErrorCode::NonBinaryInput, "dice_score needs {0,1} masks");
  std::size_t inter = 0, pred = 0, truth = 0;
  for (std::size_t i = 0; i < pred_mask.numel(); ++i) {
    const bool p = pred_mask[i] == 1.0, t = target_mask[i] == 1.0;
    inter += p && t;
    pred += p;
    truth += t;
  }
  if (pred + truth == 0) return 1.0;
  return 2.0 * double(inter) / double(pred + truth);
}

}  // namespace fedoap
