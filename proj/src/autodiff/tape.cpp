#include "fedoap/tape.hpp"

#include "fedoap/error.hpp"

namespace fedoap {

Tensor Gradients::of(Var v) const {
  auto it = grads_.find(v.id);
  if (it != grads_.end() && v.tape == tape_) return it->second;
  return Tensor::zeros_like(v.value());
}

Var Tape::variable(Tensor value, bool requires_grad) {
  value.check_finite("leaf");
  Node node;
  node.op = requires_grad ? "param" : "const";
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  value.check_finite(op.data());
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    require(owns(in), ErrorCode::DetachedRoot, std::string("input of ") + std::string(op) + " belongs to another tape");
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  require(owns(v), ErrorCode::DetachedRoot, "variable does not belong to this tape");
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  require(owns(v), ErrorCode::DetachedRoot, "variable does not belong to this tape");
  return nodes_[v.id].requires_grad;
}

std::string_view Tape::op(Var v) const {
  require(owns(v), ErrorCode::DetachedRoot, "variable does not belong to this tape");
  return nodes_[v.id].op;
}

Gradients Tape::backward(Var root) const {
  require(owns(root), ErrorCode::DetachedRoot, "backward root is not on this tape");
  const Node& root_node = nodes_[root.id];
  require(root_node.value.numel() == 1, ErrorCode::NonScalarRoot,
          "backward root has shape " + shape_to_string(root_node.value.shape()));

  Gradients out;
  out.tape_ = this;
  if (!root_node.requires_grad) return out;

  std::vector<Tensor> grads(root.id + 1);
  std::vector<bool> has_grad(root.id + 1, false);
  grads[root.id] = Tensor(root_node.value.shape(), 1.0);
  has_grad[root.id] = true;

  std::vector<Tensor*> input_grads;
  for (std::uint32_t id = root.id + 1; id-- > 0;) {
    if (!has_grad[id]) continue;
    const Node& node = nodes_[id];
    if (!node.backward) continue;
    input_grads.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const std::uint32_t in = node.inputs[i];
      if (!nodes_[in].requires_grad) continue;
      if (!has_grad[in]) {
        grads[in] = Tensor::zeros_like(nodes_[in].value);
        has_grad[in] = true;
      }
      input_grads[i] = &grads[in];
    }
    node.backward(*this, node.value, grads[id], input_grads);
  }

  for (std::uint32_t id = 0; id <= root.id; ++id) {
    if (has_grad[id] && nodes_[id].requires_grad) {
      grads[id].check_finite("gradient");
      out.grads_.emplace(id, std::move(grads[id]));
    }
  }
  return out;
}

}  // namespace fedoap
