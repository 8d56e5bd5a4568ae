#pragma once

#include "fedoap/rng.hpp"
#include "fedoap/tape.hpp"

namespace fedoap {

struct PblConfig {
  double tau = 0.75;
  double lambda = 0.1;
  double noise_variance = 0.1;

  // Throws InvalidConfig.
  void validate() const;
};

struct LossBreakdown {
  double seg_loss = 0.0;
  double perturbed_loss = 0.0;
  double composite = 0.0;
  double bce = 0.0;
  double dice_term = 0.0;
};

struct SegLoss {
  Var total;  // 0.5 * bce + dice
  Var bce;
  Var dice;
};

// Dice-loss smoothing constant.
inline constexpr double kDiceSmoothing = 1.0;

// Mean logit-space binary cross-entropy plus soft Dice loss over the whole
// tensor. `target` must be {0,1}-valued with the logits' shape.
SegLoss segmentation_loss(Var logits, const Tensor& target);

// 1 where |y - sigmoid(logit)| > tau, else 0. Carries no gradient.
Tensor inconsistency_mask(const Tensor& target, const Tensor& logits, double tau);

// logits + delta * eps with eps ~ N(0, variance). Draws happen only at delta=1
// positions, in row-major order. The noise is a constant w.r.t. the graph.
Var perturb_logits(Var logits, const Tensor& delta, Rng& rng, double variance);

struct PblLoss {
  Var composite;
  LossBreakdown breakdown;
};

// (1 - lambda) * L_s(logits) + lambda * L_s(perturbed logits).
PblLoss composite_pbl_loss(Var logits, const Tensor& target, const PblConfig& cfg, Rng& rng);

// Hard {0,1} mask: 1 where sigmoid(logit) > 0.5.
Tensor binarize_logits(const Tensor& logits);

// 2|P ∩ T| / (|P| + |T|) on binary masks; 1 when both are empty.
double dice_score(const Tensor& pred_mask, const Tensor& target_mask);

}  // namespace fedoap
