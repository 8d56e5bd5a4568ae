#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fedoap/tape.hpp"

// Differentiable primitives. Every function computes the exact forward value,
// records a node on the inputs' tape, and registers its vector-Jacobian
// product. Inputs must live on the same tape.
namespace fedoap::ops {

// Elementwise with leading-axis broadcasting: the smaller operand's shape must
// equal a suffix of the larger operand's shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

Var scale(Var x, double factor);
Var relu(Var x);
Var sigmoid(Var x);

// Softmax over the last axis.
Var softmax(Var x);

// [m, k] x [k, n] -> [m, n]
Var matmul(Var a, Var b);
// [m, n] -> [n, m]
Var transpose(Var x);

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x [N, C, H, W], weight [O, C, kh, kw], optional bias [O] -> [N, O, Ho, Wo]
// with Ho = (H + 2p - kh) / s + 1. Zero padding.
Var conv2d(Var x, Var weight, std::optional<Var> bias, Conv2dAttrs attrs = {});

// Kernel 2, stride 2 upsampling. x [N, C, H, W], weight [C, O, 2, 2],
// optional bias [O] -> [N, O, 2H, 2W].
Var conv_transpose2d(Var x, Var weight, std::optional<Var> bias);

// 2x2 window, stride 2. H and W must be even.
Var maxpool2d(Var x);

// x [N, C, ...]: normalizes each (sample, channel group) block to zero mean and
// unit (biased) variance, then applies an optional per-channel affine map.
Var group_norm(Var x, std::size_t groups, std::optional<Var> gamma, std::optional<Var> beta,
               double eps = 1e-5);
// group_norm with one group per channel and no affine parameters.
Var instance_norm(Var x, double eps = 1e-5);

Var concat(std::span<const Var> parts, std::size_t axis);
inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// Contiguous range [start, start + length) along `axis`.
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
Var reshape(Var x, Shape shape);

// Scalar reductions over every element -> shape [1].
Var mean_reduce(Var x);
Var sum_reduce(Var x);

}  // namespace fedoap::ops
