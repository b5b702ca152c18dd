#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "defnet/attacks.hpp"
#include "defnet/trainer.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace defnet;

namespace {

GradientFn constant_grad(std::vector<double> g) {
  return [g](const Tensor& x) {
    Tensor out(x.shape(), x.dtype());
    for (std::size_t i = 0; i < out.numel(); ++i) out.set_item(i, g[i % g.size()]);
    return out;
  };
}

Tensor image3(double a, double b, double c) { return Tensor::from<double>({1, 3}, {a, b, c}); }

// Trained once, shared by the invariant tests.
const Model& toy_model() {
  static const Model m = [] {
    Model model = build_model(fixture::tiny_spec(21));
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.lr0 = 0.05;
    cfg.lr_drop_epochs = {};
    cfg.augment = false;
    train(model, fixture::quadrant_dataset(96, 21), nullptr, cfg);
    return model;
  }();
  return m;
}

struct ToyBatch {
  Tensor images;
  std::vector<int> labels;
};

ToyBatch toy_batch(std::size_t n, std::uint64_t seed) {
  const Dataset ds = fixture::quadrant_dataset(n, seed);
  return {ds.images, ds.labels};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.item(i) - b.item(i)));
  return m;
}

}  // namespace

TEST_SUITE("attacks") {
  TEST_CASE("fgsm: eps=0 is the identity, step is eps*sign") {
    const Tensor x = image3(10, 20, 30);
    const GradientFn g = constant_grad({0.3, -0.2, 0.0});
    CHECK(fgsm_iterate(x, g, 0.0).bitwise_equal(x));
    const Tensor y = fgsm_iterate(x, g, 2.0);
    CHECK(y.item(0) == 12.0);
    CHECK(y.item(1) == 18.0);
    CHECK(y.item(2) == 30.0);
    const Tensor edge = fgsm_iterate(image3(254, 1, 0), constant_grad({1, -1, -1}), 4.0);
    CHECK(edge.item(0) == 255.0);
    CHECK(edge.item(1) == 0.0);
  }

  TEST_CASE("pgd projects onto the alpha ball") {
    const Tensor x = image3(100, 100, 100);
    const Tensor y = pgd_iterate(x, constant_grad({1, -1, 0}), 30.0, 1, 16.0);
    CHECK(y.item(0) == 116.0);
    CHECK(y.item(1) == 84.0);
    CHECK(y.item(2) == 100.0);
    const Tensor many = pgd_iterate(x, constant_grad({1, -1, 1}), 1.0, 40, 16.0);
    CHECK(max_abs_diff(many, x) == 16.0);
  }

  TEST_CASE("pgd with one step inside the ball equals fgsm") {
    const Tensor x = oracle::random_tensor({4, 6}, 3, 0, 255);
    const GradientFn g = constant_grad({0.5, -1, 0, 2, -0.1, 0.7});
    CHECK(pgd_iterate(x, g, 3.0, 1, 3.0).bitwise_equal(fgsm_iterate(x, g, 3.0)));
    CHECK(pgd_iterate(x, g, 3.0, 1, 10.0).bitwise_equal(fgsm_iterate(x, g, 3.0)));
  }

  TEST_CASE("mifgsm: mu=0 matches pgd; first step matches fgsm") {
    const Tensor x = oracle::random_tensor({2, 5}, 4, 0, 255);
    int call = 0;
    const GradientFn varying = [&](const Tensor& v) {
      Tensor out(v.shape(), v.dtype());
      for (std::size_t i = 0; i < out.numel(); ++i)
        out.set_item(i, std::sin(0.7 * static_cast<double>(i) + call));
      ++call;
      return out;
    };
    call = 0;
    const Tensor p = pgd_iterate(x, varying, 1.0, 7, 4.0);
    call = 0;
    const Tensor m = mifgsm_iterate(x, varying, 1.0, 7, 4.0, 0.0);
    CHECK(m.bitwise_equal(p));
    for (double mu : {0.0, 0.5, 1.0, 3.0}) {
      call = 0;
      const Tensor one = mifgsm_iterate(x, varying, 2.0, 1, 8.0, mu);
      call = 0;
      CHECK(one.bitwise_equal(fgsm_iterate(x, varying, 2.0)));
    }
  }

  TEST_CASE("mifgsm two-step recurrence by hand") {
    // grad1 = (1, -3), |.|_1 = 4 -> g1 = (.25, -.75)
    // grad2 = (-2, 0.5), |.|_1 = 2.5 -> g2 = mu*g1 + (-.8, .2) = (-.55, -.55) for mu = 1
    const Tensor x = Tensor::from<double>({1, 2}, {50, 50});
    int call = 0;
    const GradientFn g = [&](const Tensor& v) {
      Tensor out(v.shape(), v.dtype());
      out.set_item(0, call == 0 ? 1.0 : -2.0);
      out.set_item(1, call == 0 ? -3.0 : 0.5);
      ++call;
      return out;
    };
    const Tensor y = mifgsm_iterate(x, g, 1.0, 2, 10.0, 1.0);
    CHECK(y.item(0) == 50.0);  // +1 then -1
    CHECK(y.item(1) == 48.0);  // -1 then -1
    call = 0;
    const Tensor z = mifgsm_iterate(x, g, 1.0, 2, 10.0, 4.0);
    // mu = 4: g2 = (1 - .8, -3 + .2) -> (+, -)
    CHECK(z.item(0) == 52.0);
    CHECK(z.item(1) == 48.0);
  }

  TEST_CASE("degenerate and non-finite gradients raise NumericError") {
    const Tensor x = image3(1, 2, 3);
    CHECK_THROWS_AS(mifgsm_iterate(x, constant_grad({0, 0, 0}), 1.0, 2, 4.0, 1.0), NumericError);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fgsm_iterate(x, constant_grad({1, nan, 0}), 1.0), NumericError);
    CHECK_THROWS_AS(pgd_iterate(x, constant_grad({1, nan, 0}), 1.0, 3, 4.0), NumericError);
  }

  TEST_CASE("cw_loss examples") {
    const std::vector<double> a{2, 5}, b{5, 2};
    CHECK(cw_loss(a, 0, 0.0) == 3.0);
    CHECK(cw_loss(b, 0, 5.0) == -3.0);
    CHECK(cw_loss(b, 0, 1.0) == -1.0);
    const auto ladder = cw_c_ladder(1e-3, 1e3, 30);
    REQUIRE(ladder.size() == 30);
    CHECK(ladder.front() == doctest::Approx(1e-3));
    CHECK(ladder.back() == 1e3);
    CHECK(std::is_sorted(ladder.begin(), ladder.end()));
  }

  TEST_CASE("cw with c=0 stays at the original image") {
    const Model& m = toy_model();
    const ToyBatch b = toy_batch(3, 5);
    const Tensor x = b.images.to(DType::kFloat32);
    const std::vector<double> c(3, 0.0);
    const Tensor out = cw_optimize(m, x, b.labels, c, 0.0, 50, 0.01);
    CHECK(max_abs_diff(out, x) < 1e-3);
  }

  TEST_CASE("cw successes are misclassified with margin at least kappa") {
    const Model& m = toy_model();
    const ToyBatch b = toy_batch(12, 6);
    for (double kappa : {0.0, 2.0}) {
      AttackSpec spec;
      spec.family = AttackFamily::kCw;
      spec.kappa = kappa;
      spec.c_search_steps = 6;
      spec.inner_steps = 40;
      spec.cw_learning_rate = 0.05;
      const auto res = run_attack(m, b.images, b.labels, spec);
      std::size_t wins = 0;
      for (std::size_t i = 0; i < res.size(); ++i) {
        if (!res[i].success) continue;
        ++wins;
        const Tensor z = predict_logits(m, to_pixels(res[i].image.reshaped({1, 1, 8, 8}), DType::kFloat32));
        std::vector<double> row{z.item(0), z.item(1), z.item(2)};
        CHECK(argmax_rows(z)[0] != b.labels[i]);
        CHECK(-cw_loss(row, b.labels[i], 0.0) <= -kappa + 1e-4);
      }
      CHECK(wins > 0);
    }
  }

  TEST_CASE("boundary_score examples") {
    std::vector<Tensor> zero{Tensor({4}, DType::kFloat64)};
    CHECK(boundary_score(zero, 4) == 0.0);
    auto p = [](double msq) { return Tensor::from<double>({1}, {std::sqrt(msq)}); };
    std::vector<Tensor> three{p(0.01), p(0.09), p(0.04)};
    CHECK(boundary_score(three, 1) == doctest::Approx(0.04));
    std::vector<Tensor> doubled;
    for (const Tensor& t : three) doubled.push_back(Tensor::from<double>({1}, {2 * t.item(0)}));
    CHECK(boundary_score(doubled, 1) == doctest::Approx(4 * 0.04));
    std::vector<Tensor> four{p(0.01), p(0.09), p(0.04), p(0.02)};
    CHECK(boundary_score(four, 1) == doctest::Approx(0.03));
    CHECK_THROWS_AS(boundary_score(std::vector<Tensor>{}, 1), ConfigError);
  }

  TEST_CASE("boundary attack on a linear two-class model approaches the plane") {
    // label = [w.x > b]; analytic distance |w.x0 - b| / |w|
    const std::size_t n = 16;
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = std::cos(1.3 * static_cast<double>(i)) + 0.2;
    const double bias = 1000.0;
    const LabelOracle oracle = [&](const Tensor& img) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += w[i] * img.item(i);
      return s > bias ? 1 : 0;
    };
    const Tensor x = oracle::random_tensor({1, 4, 4}, 9, 20, 60, DType::kFloat32);
    REQUIRE(oracle(x) == 0);
    double dot = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dot += w[i] * x.item(i);
      norm += w[i] * w[i];
    }
    const double analytic = std::abs(dot - bias) / std::sqrt(norm);
    BoundaryTrace trace;
    const AdvResult r = boundary_attack(oracle, x, 0, 2000, 3, {}, &trace);
    REQUIRE(trace.initialized);
    CHECK(r.success);
    CHECK(oracle(r.image.to(DType::kFloat32)) != 0);
    CHECK(r.queries > 0);
    for (std::size_t i = 1; i < trace.accepted_l2.size(); ++i)
      CHECK(trace.accepted_l2[i] <= trace.accepted_l2[i - 1]);
    CHECK(trace.final_l2 <= 2.0 * analytic);
    CHECK(trace.final_l2 >= analytic * (1 - 1e-9));
  }

  TEST_CASE("boundary attack reports an initialization failure") {
    const LabelOracle constant = [](const Tensor&) { return 0; };
    BoundaryTrace trace;
    const AdvResult r = boundary_attack(constant, Tensor({1, 2, 2}, DType::kFloat32), 0, 50, 1, {}, &trace);
    CHECK_FALSE(r.success);
    CHECK_FALSE(trace.initialized);
  }

  TEST_CASE("gaussian noise: sigma 0 is identity, draws stay in the clip band") {
    const Tensor x = oracle::random_tensor({1, 8, 8}, 2, 0, 255, DType::kFloat32);
    CHECK(gaussian_noise(x, 0.0, 3).bitwise_equal(x));
    Rng rng = make_rng(4);
    for (double v : clipped_gaussian(100000, 16.0, rng)) CHECK_UNARY(std::abs(v) <= 32.0);
    const Tensor y = gaussian_noise(x, 16.0, 5);
    CHECK(y.bitwise_equal(gaussian_noise(x, 16.0, 5)));
    for (std::size_t i = 0; i < y.numel(); ++i) {
      CHECK_UNARY(y.item(i) >= 0.0);
      CHECK_UNARY(y.item(i) <= 255.0);
      CHECK_UNARY(std::abs(y.item(i) - x.item(i)) <= 32.0);
    }
  }

  TEST_CASE("pre-clip noise has the requested standard deviation") {
    Rng rng = make_rng(6);
    const auto v = clipped_gaussian(1000000, 8.0, rng, false);
    double s = 0.0, s2 = 0.0;
    for (double d : v) {
      s += d;
      s2 += d * d;
    }
    const double mean = s / static_cast<double>(v.size());
    const double sd = std::sqrt(s2 / static_cast<double>(v.size()) - mean * mean);
    CHECK(std::abs(sd - 8.0) < 0.08);
  }

  TEST_CASE("gradient attack budgets and quantized results") {
    const Model& m = toy_model();
    const ToyBatch b = toy_batch(30, 7);
    for (AttackFamily f : {AttackFamily::kFgsm, AttackFamily::kPgd, AttackFamily::kMifgsm}) {
      AttackSpec spec;
      spec.family = f;
      spec.epsilon = f == AttackFamily::kFgsm ? 8.0 : 2.0;
      spec.alpha = 16.0;
      spec.steps = 10;
      spec.batch_size = 7;
      const auto res = run_attack(m, b.images, b.labels, spec);
      REQUIRE(res.size() == 30);
      const double budget = f == AttackFamily::kFgsm ? spec.epsilon : spec.alpha;
      const auto pred = predict_labels(m, to_pixels(stack([&] {
                                         std::vector<Tensor> v;
                                         for (const auto& r : res) v.push_back(r.image);
                                         return v;
                                       }()), DType::kFloat32));
      for (std::size_t i = 0; i < res.size(); ++i) {
        CHECK(res[i].image.dtype() == DType::kUInt8);
        CHECK(res[i].linf <= budget + 1.0);
        CHECK(res[i].linf == max_abs_diff(res[i].image, b.images.slice0(i)));
        CHECK(res[i].success == (pred[i] != b.labels[i]));
      }
    }
  }

  TEST_CASE("run_attack does not depend on the thread count") {
    const Model& m = toy_model();
    const ToyBatch b = toy_batch(20, 8);
    for (AttackFamily f : {AttackFamily::kPgd, AttackFamily::kGaussian, AttackFamily::kBoundary}) {
      AttackSpec spec;
      spec.family = f;
      spec.sigma = 20.0;
      spec.iterations = 50;
      spec.batch_size = 6;
      spec.seed = 11;
      const auto one = run_attack(m, b.images, b.labels, spec, 1);
      const auto three = run_attack(m, b.images, b.labels, spec, 3);
      for (std::size_t i = 0; i < one.size(); ++i) {
        CHECK(one[i].image.bitwise_equal(three[i].image));
        CHECK(one[i].queries == three[i].queries);
      }
    }
  }

  TEST_CASE("adversarial results round-trip through a directory") {
    const Model& m = toy_model();
    const ToyBatch b = toy_batch(5, 9);
    AttackSpec spec;
    spec.steps = 3;
    const auto res = run_attack(m, b.images, b.labels, spec);
    const std::vector<std::size_t> ids{4, 8, 15, 16, 23};
    const auto dir = std::filesystem::temp_directory_path() / "defnet_adv";
    std::filesystem::remove_all(dir);
    write_adv_results(dir, res, b.labels, ids);
    const AdvBatch back = read_adv_results(dir);
    CHECK(back.sample_ids == ids);
    CHECK(back.labels == b.labels);
    REQUIRE(back.results.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(back.results[i].image.bitwise_equal(res[i].image));
      CHECK(back.results[i].success == res[i].success);
    }
    CHECK(back.images().shape() == Shape{5, 1, 8, 8});
  }

  TEST_CASE("attack specs validate and describe themselves") {
    AttackSpec s;
    CHECK(s.describe() == "pgd(eps=1,alpha=16,T=20)");
    s.epsilon = -1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = AttackSpec{};
    s.steps = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK(parse_attack_family("mifgsm") == AttackFamily::kMifgsm);
    CHECK_THROWS_AS(parse_attack_family("deepfool"), ConfigError);
  }
}
