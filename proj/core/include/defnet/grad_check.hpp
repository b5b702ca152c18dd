#pragma once

#include <functional>

#include "defnet/autograd.hpp"

namespace defnet {

// A scalar-valued function expressed on a tape: receives the tape and the
// input Var, returns a scalar Var.
using TapeFunction = std::function<Var(Tape&, Var)>;

// Central differences (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps).
Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point,
                        double eps);

// max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-12).
double max_relative_error(const Tensor& analytic, const Tensor& numeric);

// Compares backward() against central differences at `point` (use float64).
double grad_check(const TapeFunction& fn, const Tensor& point, double eps = 1e-6);

}  // namespace defnet
