#include <cmath>
#include <limits>

#include "defnet/autograd.hpp"
#include "defnet/grad_check.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace defnet;

namespace {

Tensor f64(Shape shape, std::vector<double> v) { return Tensor::from<double>(std::move(shape), std::move(v)); }

// Random point whose entries all have magnitude > 1e-3 (away from ReLU kinks).
Tensor kink_free(Shape shape, std::uint64_t seed) {
  Tensor t = oracle::random_tensor(std::move(shape), seed);
  for (double& v : t.data<double>())
    if (std::abs(v) < 0.05) v = v < 0 ? -0.05 - v : 0.05 + v;
  return t;
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("conv2d identity kernel reproduces the input") {
    Tape tape(false);
    Tensor x = oracle::random_tensor({2, 1, 3, 3}, 1);
    Var y = conv2d(tape.constant(x), tape.constant(f64({1, 1, 1, 1}, {1})),
                   tape.constant(f64({1}, {0})), 1, 0);
    CHECK(y.value().bitwise_equal(x));
  }

  TEST_CASE("conv2d diagonal kernel on a 2x2 input") {
    Tape tape(false);
    Var y = conv2d(tape.constant(f64({1, 1, 2, 2}, {1, 2, 3, 4})),
                   tape.constant(f64({1, 1, 2, 2}, {1, 0, 0, 1})), tape.constant(f64({1}, {0})),
                   1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value().item(0) == 5.0);
  }

  TEST_CASE("conv2d zero kernel yields the bias everywhere") {
    Tape tape(false);
    Var y = conv2d(tape.constant(oracle::random_tensor({2, 3, 5, 5}, 2)),
                   tape.constant(Tensor({2, 3, 3, 3}, DType::kFloat64)),
                   tape.constant(f64({2}, {0.75, 0.75})), 1, 1);
    for (std::size_t i = 0; i < y.value().numel(); ++i) CHECK(y.value().item(i) == 0.75);
  }

  TEST_CASE("conv2d errors") {
    Tape tape(false);
    Var x = tape.constant(oracle::random_tensor({1, 2, 4, 4}, 3));
    Var b = tape.constant(Tensor({1}, DType::kFloat64));
    CHECK_THROWS_AS(conv2d(x, tape.constant(Tensor({1, 3, 3, 3}, DType::kFloat64)), b, 1, 0),
                    DimensionError);
    CHECK_THROWS_AS(conv2d(x, tape.constant(Tensor({1, 2, 3, 3}, DType::kFloat64)), b, 2, 0),
                    ConfigError);
  }

  TEST_CASE("conv2d matches the direct-summation oracle bit for bit") {
    std::uint64_t seed = 10;
    for (std::size_t stride : {1, 2})
      for (std::size_t pad : {0, 1})
        for (std::size_t k : {1, 3}) {
          const std::size_t m = 7 + (stride == 2 && pad == 0 ? 0 : 0);
          const std::size_t span = m + 2 * pad - k;
          if (span % stride) continue;
          Tensor x = oracle::random_tensor({2, 3, m, m}, ++seed);
          Tensor w = oracle::random_tensor({4, 3, k, k}, ++seed);
          Tensor b = oracle::random_tensor({4}, ++seed);
          Tape tape(false);
          Var y = conv2d(tape.constant(x), tape.constant(w), tape.constant(b), stride, pad);
          CHECK(y.value().bitwise_equal(oracle::conv2d(x, w, b, stride, pad)));
        }
  }

  TEST_CASE("relu examples") {
    Tape tape(false);
    Var y = relu(tape.constant(f64({3}, {-1, 0, 2})));
    CHECK(y.value().item(0) == 0.0);
    CHECK(y.value().item(1) == 0.0);
    CHECK(y.value().item(2) == 2.0);
    Tensor x = oracle::random_tensor({50}, 4);
    Var once = relu(tape.constant(x));
    CHECK(relu(once).value().bitwise_equal(once.value()));
  }

  TEST_CASE("relu gradient is 0 below and 1 above zero") {
    Tensor x = f64({2}, {-1, 2});
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(sum(relu(tape.leaf(x))));
    CHECK(x.grad().item(0) == 0.0);
    CHECK(x.grad().item(1) == 1.0);
  }

  TEST_CASE("batch norm: constant input normalizes to zero") {
    Tape tape(false);
    BatchNormStats stats;
    Var y = batch_norm_train(tape.constant(Tensor::full<double>({4, 2, 3, 3}, 5.0)),
                             tape.constant(f64({2}, {1, 1})), tape.constant(f64({2}, {0, 0})),
                             stats);
    for (std::size_t i = 0; i < y.value().numel(); ++i) CHECK(std::abs(y.value().item(i)) < 1e-9);
  }

  TEST_CASE("batch norm: gamma 0 gives beta") {
    Tape tape(false);
    BatchNormStats stats;
    Var y = batch_norm_train(tape.constant(oracle::random_tensor({3, 2, 2, 2}, 5)),
                             tape.constant(f64({2}, {0, 0})), tape.constant(f64({2}, {1.5, -2})),
                             stats);
    for (std::size_t i = 0; i < y.value().numel(); ++i) {
      CHECK(y.value().item(i) == ((i / 4) % 2 == 0 ? 1.5 : -2.0));
    }
  }

  TEST_CASE("batch norm: values -1 and +1 normalize to +-1/sqrt(1+eps)") {
    Tape tape(false);
    BatchNormStats stats;
    const double eps = 1e-5;
    Var y = batch_norm_train(tape.constant(f64({2, 1, 1, 1}, {-1, 1})), tape.constant(f64({1}, {1})),
                             tape.constant(f64({1}, {0})), stats, eps);
    const double expect = 1.0 / std::sqrt(1.0 + eps);
    CHECK(y.value().item(0) == doctest::Approx(-expect).epsilon(1e-14));
    CHECK(y.value().item(1) == doctest::Approx(expect).epsilon(1e-14));
  }

  TEST_CASE("batch norm: running statistics move only in train mode") {
    Tape tape(false);
    BatchNormStats stats;
    Tensor x = oracle::random_tensor({4, 2, 2, 2}, 6, 2.0, 4.0);
    batch_norm_eval(tape.constant(x), tape.constant(f64({2}, {1, 1})),
                    tape.constant(f64({2}, {0, 0})), BatchNormStats{f64({2}, {0, 0}), f64({2}, {1, 1})});
    batch_norm_train(tape.constant(x), tape.constant(f64({2}, {1, 1})),
                     tape.constant(f64({2}, {0, 0})), stats);
    // 0.9 * 0 + 0.1 * mean, mean in (2,4)
    CHECK(stats.running_mean.item(0) > 0.2);
    CHECK(stats.running_mean.item(0) < 0.4);
  }

  TEST_CASE("batch norm: empty batch in train mode is a configuration error") {
    Tape tape(false);
    BatchNormStats stats;
    CHECK_THROWS_AS(batch_norm_train(tape.constant(Tensor({0, 2, 2, 2}, DType::kFloat64)),
                                     tape.constant(f64({2}, {1, 1})),
                                     tape.constant(f64({2}, {0, 0})), stats),
                    ConfigError);
  }

  TEST_CASE("linear examples") {
    Tape tape(false);
    Tensor x = oracle::random_tensor({3, 2}, 7);
    Var id = linear(tape.constant(x), tape.constant(f64({2, 2}, {1, 0, 0, 1})),
                    tape.constant(f64({2}, {0, 0})));
    CHECK(id.value().bitwise_equal(x));
    Var zero = linear(tape.constant(x), tape.constant(Tensor({2, 2}, DType::kFloat64)),
                      tape.constant(f64({2}, {4, -1})));
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(zero.value().item(r * 2) == 4.0);
      CHECK(zero.value().item(r * 2 + 1) == -1.0);
    }
    Var y = linear(tape.constant(f64({1, 2}, {1, 2})), tape.constant(f64({3, 2}, {1, 0, 0, 1, 1, 1})),
                   tape.constant(f64({3}, {0, 0, 0})));
    CHECK(y.value().item(0) == 1.0);
    CHECK(y.value().item(1) == 2.0);
    CHECK(y.value().item(2) == 3.0);
    CHECK_THROWS_AS(linear(tape.constant(x), tape.constant(Tensor({2, 3}, DType::kFloat64)),
                           tape.constant(f64({2}, {0, 0}))),
                    DimensionError);
  }

  TEST_CASE("pool examples") {
    Tape tape(false);
    Var x = tape.constant(f64({1, 1, 2, 2}, {1, 2, 3, 4}));
    CHECK(pool2d(x, PoolKind::kMax, 2, 2).value().item() == 4.0);
    CHECK(pool2d(x, PoolKind::kAvg, 2, 2).value().item() == 2.5);
    CHECK(pool2d(x, PoolKind::kMax, 1, 1).value().bitwise_equal(x.value()));
    CHECK_THROWS_AS(pool2d(tape.constant(Tensor({1, 1, 3, 3}, DType::kFloat64)), PoolKind::kMax, 2, 2),
                    ConfigError);
  }

  TEST_CASE("max pool routes ties to the first maximum") {
    Tensor x = f64({1, 1, 2, 2}, {3, 3, 3, 3});
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(sum(pool2d(tape.leaf(x), PoolKind::kMax, 2, 2)));
    CHECK(x.grad().item(0) == 1.0);
    CHECK(x.grad().item(1) == 0.0);
    CHECK(x.grad().item(3) == 0.0);
  }

  TEST_CASE("cross-entropy of uniform logits is ln C") {
    for (std::size_t c : {2, 10, 37}) {
      Tape tape(false);
      std::vector<int> labels{0, static_cast<int>(c) - 1};
      Var l = softmax_cross_entropy(tape.constant(Tensor::full<double>({2, c}, 0.3)), labels);
      CHECK(std::abs(l.value().item() - std::log(static_cast<double>(c))) < 1e-12);
    }
  }

  TEST_CASE("cross-entropy tends to zero for a dominant true logit") {
    Tape tape(false);
    std::vector<int> labels{1};
    Var l = softmax_cross_entropy(tape.constant(f64({1, 3}, {0, 1000, 0})), labels);
    CHECK(l.value().item() >= 0.0);
    CHECK(l.value().item() < 1e-300);
  }

  TEST_CASE("cross-entropy is never negative and rejects bad labels") {
    Tape tape(false);
    std::vector<int> labels{0, 2, 1, 1};
    Var l = softmax_cross_entropy(tape.constant(oracle::random_tensor({4, 3}, 8, -30, 30)), labels);
    CHECK(l.value().item() >= 0.0);
    std::vector<int> bad{3};
    CHECK_THROWS(softmax_cross_entropy(tape.constant(Tensor({1, 3}, DType::kFloat64)), bad));
  }

  TEST_CASE("cross-entropy gradient is (softmax - onehot)/B and matches finite differences") {
    Tensor x = oracle::random_tensor({3, 4}, 9, -2, 2);
    std::vector<int> labels{0, 3, 1};
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(softmax_cross_entropy(tape.leaf(x), labels));
    const Tensor p = softmax(x);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 4; ++c) {
        const double expect = (p.item(r * 4 + c) - (static_cast<int>(c) == labels[r])) / 3.0;
        CHECK(x.grad().item(r * 4 + c) == doctest::Approx(expect).epsilon(1e-12));
      }
    const double err = grad_check(
        [&](Tape&, Var v) { return softmax_cross_entropy(v, labels); }, x, 1e-6);
    CHECK(err < 1e-6);
  }

  TEST_CASE("backward of sum gives ones, unrelated leaves get zeros") {
    Tensor x = oracle::random_tensor({2, 3}, 11);
    Tensor z = oracle::random_tensor({2}, 12);
    x.set_requires_grad(true);
    z.set_requires_grad(true);
    Tape tape;
    Var vz = tape.leaf(z);
    (void)vz;
    tape.backward(sum(tape.leaf(x)));
    for (std::size_t i = 0; i < 6; ++i) CHECK(x.grad().item(i) == 1.0);
    for (std::size_t i = 0; i < 2; ++i) CHECK(z.grad().item(i) == 0.0);
  }

  TEST_CASE("tape is single-use and needs a scalar loss") {
    Tensor x = oracle::random_tensor({3}, 13);
    x.set_requires_grad(true);
    Tape tape;
    Var s = sum(tape.leaf(x));
    CHECK_THROWS_AS(tape.backward(tape.leaf(x)), TapeError);
    tape.backward(s);
    CHECK_THROWS_AS(tape.backward(s), TapeError);
  }

  TEST_CASE("backward is deterministic") {
    auto run = [] {
      Tensor x = oracle::random_tensor({2, 2, 6, 6}, 14);
      Tensor w = oracle::random_tensor({3, 2, 3, 3}, 15);
      Tensor b = oracle::random_tensor({3}, 16);
      w.set_requires_grad(true);
      Tape tape;
      Var y = conv2d(tape.constant(x), tape.leaf(w), tape.constant(b), 1, 1);
      tape.backward(sum(mul(y, y)));
      return w.grad();
    };
    CHECK(run().bitwise_equal(run()));
  }

  TEST_CASE("grad_check: exact for linear functions") {
    Tensor c = oracle::random_tensor({5}, 17);
    const double err = grad_check([&](Tape&, Var v) { return dot_const(v, c); },
                                  oracle::random_tensor({5}, 18));
    CHECK(err < 1e-9);
  }

  TEST_CASE("grad_check: doubled analytic gradient gives relative error 0.5") {
    auto doubled_sum = [](Tape& tape, Var v) {
      double s = 0.0;
      for (std::size_t i = 0; i < v.value().numel(); ++i) s += v.value().item(i);
      return tape.record(Tensor::from<double>({}, {s}), {v}, [](BackwardContext& ctx) {
        const double g = ctx.out_grad().item();
        for (double& d : ctx.input_grad(0).data<double>()) d += 2.0 * g;
      });
    };
    const double err = grad_check(doubled_sum, oracle::random_tensor({4}, 19));
    CHECK(err == doctest::Approx(0.5).epsilon(1e-6));
  }

  TEST_CASE("grad_check of sum(conv2d(x,w)^2) in x and w") {
    Tensor x = oracle::random_tensor({2, 2, 5, 5}, 20);
    Tensor w = oracle::random_tensor({3, 2, 3, 3}, 21);
    Tensor b = oracle::random_tensor({3}, 22);
    CHECK(grad_check([&](Tape& t, Var v) {
            Var y = conv2d(v, t.constant_ref(w), t.constant_ref(b), 2, 1);
            return sum(mul(y, y));
          }, x) < 1e-6);
    CHECK(grad_check([&](Tape& t, Var v) {
            Var y = conv2d(t.constant_ref(x), v, t.constant_ref(b), 1, 0);
            return sum(mul(y, y));
          }, w) < 1e-6);
    CHECK(grad_check([&](Tape& t, Var v) {
            Var y = conv2d(t.constant_ref(x), t.constant_ref(w), v, 1, 1);
            return sum(mul(y, y));
          }, b) < 1e-6);
  }

  TEST_CASE("grad_check over the remaining ops") {
    Tensor c = oracle::random_tensor({3, 2, 4, 4}, 30);
    auto weighted = [&](Var y) {
      Tensor coeff = oracle::random_tensor(y.shape(), 31);
      return dot_const(y, coeff);
    };
    CHECK(grad_check([&](Tape&, Var v) { return weighted(relu(v)); }, kink_free({3, 2, 4, 4}, 32)) < 1e-5);
    CHECK(grad_check([&](Tape& t, Var v) {
            BatchNormStats s;
            return weighted(batch_norm_train(v, t.constant(f64({2}, {1.3, 0.7})),
                                             t.constant(f64({2}, {0.1, -0.2})), s));
          }, oracle::random_tensor({3, 2, 4, 4}, 33)) < 1e-5);
    CHECK(grad_check([&](Tape& t, Var v) {
            BatchNormStats s;
            return weighted(batch_norm_train(t.constant_ref(c), v, t.constant(f64({2}, {0.1, -0.2})), s));
          }, oracle::random_tensor({2}, 34)) < 1e-5);
    CHECK(grad_check([&](Tape& t, Var v) {
            const BatchNormStats s{f64({2}, {0.2, -0.1}), f64({2}, {1.5, 0.8})};
            return weighted(batch_norm_eval(v, t.constant(f64({2}, {1.3, 0.7})),
                                            t.constant(f64({2}, {0.1, -0.2})), s));
          }, oracle::random_tensor({3, 2, 4, 4}, 35)) < 1e-5);
    CHECK(grad_check([&](Tape&, Var v) { return weighted(pool2d(v, PoolKind::kMax, 2, 2)); },
                     oracle::random_tensor({3, 2, 4, 4}, 36)) < 1e-5);
    CHECK(grad_check([&](Tape&, Var v) { return weighted(pool2d(v, PoolKind::kAvg, 2, 2)); },
                     oracle::random_tensor({3, 2, 4, 4}, 37)) < 1e-5);
    CHECK(grad_check([&](Tape&, Var v) { return weighted(global_avg_pool(v)); },
                     oracle::random_tensor({3, 2, 4, 4}, 38)) < 1e-5);
    Tensor w = oracle::random_tensor({4, 6}, 39);
    Tensor b = oracle::random_tensor({4}, 40);
    CHECK(grad_check([&](Tape& t, Var v) {
            return weighted(linear(v, t.constant_ref(w), t.constant_ref(b)));
          }, oracle::random_tensor({3, 6}, 41)) < 1e-5);
    Tensor xin = oracle::random_tensor({3, 6}, 42);
    CHECK(grad_check([&](Tape& t, Var v) {
            return weighted(linear(t.constant_ref(xin), v, t.constant_ref(b)));
          }, w) < 1e-5);
    Tensor other = oracle::random_tensor({3, 2, 4, 4}, 43);
    CHECK(grad_check([&](Tape& t, Var v) { return weighted(add(v, t.constant_ref(other))); }, c) < 1e-5);
    CHECK(grad_check([&](Tape& t, Var v) { return weighted(sub(t.constant_ref(other), v)); }, c) < 1e-5);
    CHECK(grad_check([&](Tape& t, Var v) { return weighted(mul(v, t.constant_ref(other))); }, c) < 1e-5);
    CHECK(grad_check([&](Tape&, Var v) { return weighted(scale(v, -2.5)); }, c) < 1e-5);
    Tensor plane = oracle::random_tensor({2, 4, 4}, 44);
    CHECK(grad_check([&](Tape& t, Var v) { return weighted(add_broadcast(v, t.constant_ref(plane))); }, c) < 1e-5);
    CHECK(grad_check([&](Tape& t, Var v) { return weighted(add_broadcast(t.constant_ref(c), v)); }, plane) < 1e-5);
    CHECK(grad_check([&](Tape&, Var v) { return weighted(mul_broadcast(v, plane)); }, c) < 1e-5);
    CHECK(grad_check([&](Tape&, Var v) { return weighted(reshape(v, {3, 32})); }, c) < 1e-5);
    std::vector<int> labels{1, 0, 3};
    CHECK(grad_check([&](Tape&, Var v) { return softmax_cross_entropy(v, labels, Reduction::kSum); },
                     oracle::random_tensor({3, 4}, 45)) < 1e-5);
  }
}
