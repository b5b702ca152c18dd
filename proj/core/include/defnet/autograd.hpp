#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <vector>

#include "defnet/tensor.hpp"

namespace defnet {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape is alive and not yet consumed by backward().
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  DType dtype() const { return value().dtype(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// What a backward rule sees: the gradient flowing into its output and lazily
// zero-initialized accumulators for each input that needs a gradient.
class BackwardContext {
 public:
  const Tensor& output() const;
  const Tensor& out_grad() const;
  const Tensor& input(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  Tensor& input_grad(std::size_t i);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}
  Tape& tape_;
  std::size_t node_;
};

// Ordered record of executed operations. Nodes are appended as operations run,
// so ids are already a topological order; backward() walks them in reverse
// exactly once and then releases every stored activation.
//
// A tape constructed with record=false only computes values (inference).
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext&)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Owned value that never receives a gradient.
  Var constant(Tensor value);
  // Borrowed value; `value` must outlive the tape.
  Var constant_ref(const Tensor& value);
  // Borrowed leaf. If `t.requires_grad()`, backward() stores d(loss)/d(t) in
  // t's grad slot (zeros when t does not influence the loss). Registering the
  // same tensor twice returns the same Var.
  Var leaf(Tensor& t);

  // Appends an operation. `fn` is dropped when nothing upstream needs a
  // gradient or the tape is not recording.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  void backward(Var loss);

  bool recording() const { return record_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }
  bool requires_grad(Var v) const;

 private:
  friend class Var;
  friend class BackwardContext;

  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor* leaf = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn fn;
    bool requires_grad = false;
    bool has_grad = false;
    Tensor grad;

    const Tensor& value() const { return borrowed ? *borrowed : owned; }
  };

  void check_alive() const;
  Var push(Node node);
  Tensor& grad_slot(std::size_t id);

  bool record_;
  bool consumed_ = false;
  // deque: references to existing nodes stay valid as the tape grows.
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> leaf_ids_;
};

enum class Mode { kTrain, kEval };

const char* to_string(Mode mode);

enum class Reduction { kMean, kSum };

enum class PoolKind { kMax, kAvg };

// Per-channel running statistics owned by a batch-norm layer.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs must share one float dtype.

// Cross-correlation with zero padding. x [B,K,M,N], w [K',K,kh,kw], b [K'].
Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t padding);

Var relu(Var x);

// Normalizes with biased batch statistics and updates `stats` by EMA
// (unbiased variance). Empty statistics are initialized to mean 0, var 1.
Var batch_norm_train(Var x, Var gamma, Var beta, BatchNormStats& stats,
                     double eps = 1e-5);
// Normalizes with the running statistics, which are left untouched.
Var batch_norm_eval(Var x, Var gamma, Var beta, const BatchNormStats& stats,
                    double eps = 1e-5);
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode,
               double eps = 1e-5);

// x [B,D], w [C,D], b [C] -> x w^T + b.
Var linear(Var x, Var w, Var b);

Var pool2d(Var x, PoolKind kind, std::size_t window, std::size_t stride);

// Mean over each [M,N] plane: [B,K,M,N] -> [B,K].
Var global_avg_pool(Var x);

Var softmax_cross_entropy(Var logits, std::span<const int> labels,
                          Reduction reduction = Reduction::kMean);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);

// x [B,...] combined with a per-sample tensor c [...] broadcast over B.
Var add_broadcast(Var x, Var c);
// Multiplies by a constant per-sample tensor (float or uint8 bits).
Var mul_broadcast(Var x, const Tensor& factor);

Var reshape(Var x, Shape shape);
Var sum(Var x);
// Sum of x * coeffs with constant coefficients of the same shape.
Var dot_const(Var x, const Tensor& coeffs);

// ---------------------------------------------------------------------------
// Non-recording kernels shared with tests and reference code.

Tensor softmax(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace defnet
