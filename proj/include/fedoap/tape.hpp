#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fedoap/tensor.hpp"

namespace fedoap {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

class Gradients {
 public:
  // Gradient w.r.t. `v`; zeros of the right shape when `v` is not connected
  // to the root.
  Tensor of(Var v) const;
  bool contains(Var v) const { return grads_.count(v.id) != 0; }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::unordered_map<std::uint32_t, Tensor> grads_;
};

// Append-only record of a computation. Nodes are stored in creation order, so
// every node's inputs precede it and reverse iteration is a valid
// topological order for backpropagation.
class Tape {
 public:
  // `out` is the node's own forward value. grad_inputs[i] is null when input
  // i does not require a gradient; gradients accumulate (+=).
  using BackwardFn = std::function<void(const Tape& tape, const Tensor& out, const Tensor& grad_out,
                                        std::span<Tensor* const> grad_inputs)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return variable(std::move(value), false); }

  // Records an op output. The backward function is kept only when at least
  // one input requires a gradient; otherwise the node is a plain constant.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::string_view op(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool owns(Var v) const noexcept { return v.tape == this && v.id < nodes_.size(); }

  // Reverse-mode sweep from a scalar root.
  Gradients backward(Var root) const;

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }
inline bool Var::requires_grad() const { return tape->requires_grad(*this); }

}  // namespace fedoap
