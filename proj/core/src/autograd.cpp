#include "defnet/autograd.hpp"

#include <algorithm>

namespace defnet {

const char* to_string(Mode mode) { return mode == Mode::kTrain ? "train" : "eval"; }

const Tensor& Var::value() const {
  if (!tape_) throw TapeError("use of an empty Var");
  tape_->check_alive();
  return tape_->nodes_[id_].value();
}

const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value(); }

const Tensor& BackwardContext::out_grad() const { return tape_.nodes_[node_].grad; }

const Tensor& BackwardContext::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value();
}

bool BackwardContext::needs_grad(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].requires_grad;
}

Tensor& BackwardContext::input_grad(std::size_t i) {
  return tape_.grad_slot(tape_.nodes_[node_].inputs.at(i));
}

void Tape::check_alive() const {
  if (consumed_) throw TapeError("tape already consumed by backward()");
}

Var Tape::push(Node node) {
  check_alive();
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.owned.clear_grad();
  return push(std::move(n));
}

Var Tape::constant_ref(const Tensor& value) {
  Node n;
  n.borrowed = &value;
  return push(std::move(n));
}

Var Tape::leaf(Tensor& t) {
  check_alive();
  if (auto it = leaf_ids_.find(&t); it != leaf_ids_.end()) return Var(this, it->second);
  Node n;
  n.borrowed = &t;
  n.leaf = &t;
  n.requires_grad = record_ && t.requires_grad();
  Var v = push(std::move(n));
  leaf_ids_.emplace(&t, v.id());
  return v;
}

bool Tape::requires_grad(Var v) const {
  check_alive();
  return nodes_.at(v.id()).requires_grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw TapeError("operation mixes Vars from different tapes");
    n.inputs.push_back(in.id_);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  n.requires_grad = n.requires_grad && record_;
  if (n.requires_grad) n.fn = std::move(fn);
  return push(std::move(n));
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    const Tensor& v = n.value();
    n.grad = Tensor(v.shape(), v.dtype());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  check_alive();
  if (!record_) throw TapeError("backward() on a non-recording tape");
  if (loss.tape_ != this) throw TapeError("loss was recorded on a different tape");
  const Tensor& lv = nodes_[loss.id_].value();
  if (lv.numel() != 1) {
    throw TapeError("backward() needs a scalar loss, got shape " +
                    shape_string(lv.shape()));
  }
  if (!lv.is_float()) throw TapeError("backward() on a non-float loss");

  grad_slot(loss.id_).fill(1.0);
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.has_grad || !n.fn) continue;
    BackwardContext ctx(*this, id);
    n.fn(ctx);
  }

  for (Node& n : nodes_) {
    if (!n.leaf || !n.requires_grad) continue;
    if (n.has_grad) {
      n.leaf->set_grad(std::move(n.grad));
    } else {
      n.leaf->set_grad(Tensor(n.leaf->shape(), n.leaf->dtype()));
    }
  }
  nodes_.clear();
  leaf_ids_.clear();
  consumed_ = true;
}

}  // namespace defnet
