#include "defnet/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace defnet {

Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point,
                        double eps) {
  Tensor probe = point.to(DType::kFloat64);
  Tensor out(point.shape(), DType::kFloat64);
  auto ps = probe.data<double>();
  auto os = out.data<double>();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double orig = ps[i];
    ps[i] = orig + eps;
    const double up = f(probe.to(point.dtype()));
    ps[i] = orig - eps;
    const double down = f(probe.to(point.dtype()));
    ps[i] = orig;
    os[i] = (up - down) / (2.0 * eps);
  }
  return out;
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric) {
  if (analytic.shape() != numeric.shape()) {
    throw DimensionError("max_relative_error: shape mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double a = analytic.item(i);
    const double n = numeric.item(i);
    const double denom = std::max({std::abs(a), std::abs(n), 1e-12});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

double grad_check(const TapeFunction& fn, const Tensor& point, double eps) {
  Tensor x = point;
  x.clear_grad();
  x.set_requires_grad(true);
  {
    Tape tape;
    Var loss = fn(tape, tape.leaf(x));
    tape.backward(loss);
  }
  auto evaluate = [&](const Tensor& p) {
    Tape tape(false);
    Tensor copy = p;
    return fn(tape, tape.constant_ref(copy)).value().item();
  };
  return max_relative_error(x.grad(), numeric_gradient(evaluate, point, eps));
}

}  // namespace defnet
