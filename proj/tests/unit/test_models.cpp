#include <cmath>

#include "defnet/grad_check.hpp"
#include "defnet/models.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace defnet;

namespace {

Model ready(const ModelSpec& spec, DType dtype = DType::kFloat32) {
  Model m = build_model(spec);
  m.set_input_mean(Tensor::full<float>(spec.input_shape, 100.0f));
  return dtype == DType::kFloat32 ? m : m.to(dtype);
}

Tensor batch(std::size_t n, std::uint64_t seed, DType dtype = DType::kFloat32) {
  return to_pixels(oracle::random_pixels({n, 1, 8, 8}, seed), dtype);
}

// logits = x_flat * w^T with a fixed w.
class LinearClassifier final : public Classifier {
 public:
  explicit LinearClassifier(Tensor w) : w_(std::move(w)), b_(Tensor({w_.dim(0)}, w_.dtype())) {}
  Var logits(Tape& tape, Var pixels) const override {
    Var flat = reshape(pixels, {pixels.shape()[0], w_.dim(1)});
    return linear(flat, tape.constant_ref(w_), tape.constant_ref(b_));
  }
  std::size_t num_classes() const override { return w_.dim(0); }
  const Shape& input_shape() const override { return shape_; }
  DType dtype() const override { return w_.dtype(); }

 private:
  Tensor w_, b_;
  Shape shape_{1, 8, 8};
};

}  // namespace

TEST_SUITE("models") {
  TEST_CASE("placement names") {
    CHECK(placement_blocks(Placement::kBottom, 5) == std::vector<std::size_t>{0, 1, 2});
    CHECK(placement_blocks(Placement::kTop, 5) == std::vector<std::size_t>{3, 4});
    CHECK(parse_placement("both", 5).size() == 5);
    CHECK(parse_placement("none", 5).empty());
    CHECK(parse_placement("2,0,2", 5) == std::vector<std::size_t>{0, 2});
    CHECK_THROWS_AS(parse_placement("7", 5), ConfigError);
    CHECK_THROWS_AS(parse_placement("left", 5), ConfigError);
  }

  TEST_CASE("placement none builds a standard CNN, bottom masks only blocks 0-2") {
    Model plain = build_model(fixture::tiny_spec());
    CHECK(plain.masks().empty());
    Model def = build_model(fixture::tiny_defective());
    const auto masks = def.masks();
    CHECK(masks.size() == 5);  // 1 + 2 + 2 convs
    for (const auto& [name, mask] : masks) {
      const bool bottom = name.rfind("block0.", 0) == 0 || name.rfind("block1.", 0) == 0 ||
                          name.rfind("block2.", 0) == 0;
      CHECK(bottom);
    }
  }

  TEST_CASE("same spec and seed build identical models") {
    Model a = build_model(fixture::tiny_defective(5));
    Model b = build_model(fixture::tiny_defective(5));
    auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].tensor->bitwise_equal(*pb[i].tensor));
    auto ma = a.masks(), mb = b.masks();
    for (std::size_t i = 0; i < ma.size(); ++i) CHECK(ma[i].second->bits().bitwise_equal(mb[i].second->bits()));
    Model c = build_model(fixture::tiny_defective(6));
    CHECK_FALSE(c.parameters()[0].tensor->bitwise_equal(*pa[0].tensor));
  }

  TEST_CASE("forward shape, determinism, and softmax normalization") {
    Model m = ready(fixture::tiny_defective());
    const Tensor x = batch(5, 1);
    const Tensor l1 = predict_logits(m, x);
    const Tensor l2 = predict_logits(m, x);
    CHECK(l1.shape() == Shape{5, 3});
    CHECK(l1.bitwise_equal(l2));
    const Tensor p = softmax(l1);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += p.item(r * 3 + c);
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    Tape tape(false);
    CHECK_THROWS_AS(m.logits(tape, tape.constant(Tensor({2, 1, 7, 7}))), DimensionError);
  }

  TEST_CASE("argmax ties go to the lowest index") {
    CHECK(argmax_rows(Tensor::from<float>({2, 3}, {1, 4, 4, 2, 2, 2})) == std::vector<int>{1, 0});
  }

  TEST_CASE("defective with p=1 equals the standard model") {
    ModelSpec one = fixture::tiny_defective(3, 1.0);
    Model a = ready(fixture::tiny_spec(3));
    Model b = ready(one);
    CHECK(b.masks().size() == 5);
    const Tensor x = batch(4, 2);
    CHECK(predict_logits(a, x).bitwise_equal(predict_logits(b, x)));
  }

  TEST_CASE("masked activations are zero for arbitrary inputs in both modes") {
    Model m = ready(fixture::tiny_defective(4, 0.4));
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      ActivationTaps taps;
      Tape tape(false);
      m.forward(tape, tape.constant(batch(3, 7)), mode, &taps);
      REQUIRE(taps.values.size() == 5);
      for (std::size_t t = 0; t < taps.values.size(); ++t) {
        const auto bits = taps.masks[t]->bits().data<std::uint8_t>();
        const Tensor& v = taps.values[t];
        for (std::size_t i = 0; i < v.numel(); ++i)
          if (!bits[i % bits.size()]) CHECK(v.item(i) == 0.0);
      }
    }
  }

  TEST_CASE("parameter count is invariant in p and placement; widening increases it") {
    const std::size_t base = build_model(fixture::tiny_spec()).parameter_count();
    for (double p : {0.1, 0.5, 0.9}) {
      CHECK(build_model(fixture::tiny_defective(0, p)).parameter_count() == base);
    }
    ModelSpec top = fixture::tiny_spec();
    top.mask_blocks = {3, 4};
    top.keep_prob = 0.5;
    CHECK(build_model(top).parameter_count() == base);
    ModelSpec wide = fixture::tiny_defective();
    wide.widen_factor = 2;
    Model w = build_model(wide);
    CHECK(w.parameter_count() > base);
    CHECK(w.masks().front().second->shape()[0] == 8);
  }

  TEST_CASE("mask variants realize their structure inside a model") {
    ModelSpec s = fixture::tiny_defective();
    s.mask_variant = MaskVariant::kChannel;
    for (const auto& [name, mask] : build_model(s).masks()) CHECK(mask->variant() == MaskVariant::kChannel);
  }

  TEST_CASE("inconsistent specs are rejected") {
    ModelSpec s = fixture::tiny_spec();
    s.mask_blocks = {9};
    CHECK_THROWS_AS(build_model(s), ConfigError);
    s = fixture::tiny_spec();
    s.blocks[1].layers = 3;
    CHECK_THROWS_AS(build_model(s), ConfigError);
    s = fixture::tiny_defective();
    s.keep_prob = 0.0;
    CHECK_THROWS_AS(build_model(s), ConfigError);
  }

  TEST_CASE("convnet_plain builds and classifies") {
    ModelSpec s = convnet_plain_spec({1, 8, 8}, 4);
    s.blocks = {{4, 1, 1}, {4, 1, 1}, {6, 2, 1}};
    Model m = ready(s);
    CHECK(predict_logits(m, batch(2, 3)).shape() == Shape{2, 4});
  }

  TEST_CASE("ensemble: single member is identical, L and -L cancel") {
    Model m = ready(fixture::tiny_spec(1));
    const Tensor x = batch(3, 4);
    Ensemble single({&m});
    CHECK(predict_logits(single, x).bitwise_equal(predict_logits(m, x)));
    Tensor w = oracle::random_tensor({3, 64}, 5, -1, 1, DType::kFloat32);
    Tensor neg = w;
    for (float& v : neg.data<float>()) v = -v;
    LinearClassifier a(w), b(neg);
    const Tensor z = predict_logits(fuse_ensemble({&a, &b}), x);
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(z.item(i) == 0.0);
  }

  TEST_CASE("ensemble rejects heterogeneous members") {
    Model a = ready(fixture::tiny_spec());
    ModelSpec other = fixture::tiny_spec();
    other.num_classes = 4;
    Model b = ready(other);
    CHECK_THROWS_AS(Ensemble({&a, &b}), ConfigError);
  }

  TEST_CASE("ensemble gradient equals the mean of member gradients") {
    Model a = ready(fixture::tiny_spec(1), DType::kFloat64);
    Model b = ready(fixture::tiny_defective(2), DType::kFloat64);
    Ensemble e({&a, &b});
    std::vector<int> labels{0, 2};
    const Tensor x = batch(2, 9, DType::kFloat64);
    CHECK(grad_check([&](Tape& t, Var v) { return softmax_cross_entropy(e.logits(t, v), labels); },
                     x, 1e-4) < 1e-5);
    // fused loss: a fixed linear functional of the logits
    const Tensor coeffs = oracle::random_tensor({2, 3}, 13, -1, 1);
    auto grad_of = [&](const Classifier& c) {
      Tensor xv = x;
      xv.set_requires_grad(true);
      Tape tape;
      tape.backward(dot_const(c.logits(tape, tape.leaf(xv)), coeffs));
      return xv.grad();
    };
    const Tensor ge = grad_of(e), ga = grad_of(a), gb = grad_of(b);
    for (std::size_t i = 0; i < ge.numel(); ++i) {
      CHECK(ge.item(i) == doctest::Approx((ga.item(i) + gb.item(i)) / 2).epsilon(1e-9));
    }
  }

  TEST_CASE("full small model passes finite differences in eval and train mode") {
    Model m = ready(fixture::tiny_defective(11), DType::kFloat64);
    std::vector<int> labels{1, 0, 2};
    const Tensor x = batch(3, 12, DType::kFloat64);
    CHECK(grad_check([&](Tape& t, Var v) { return softmax_cross_entropy(m.logits(t, v), labels); },
                     x, 1e-4) < 1e-5);
    Model trainable = m;
    CHECK(grad_check([&](Tape& t, Var v) {
            return softmax_cross_entropy(trainable.forward(t, v, Mode::kTrain), labels);
          }, x, 1e-4) < 1e-5);
  }
}
