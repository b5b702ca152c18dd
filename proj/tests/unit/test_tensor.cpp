#include <cmath>

#include "defnet/gemm.hpp"
#include "defnet/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace defnet;

TEST_SUITE("tensor") {
  TEST_CASE("shape product equals buffer length") {
    Tensor t({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.data<float>().size() == 24);
    CHECK_THROWS_AS(Tensor::from<float>({2, 2}, {1, 2, 3}), DimensionError);
  }

  TEST_CASE("uint8 tensors never carry gradients") {
    Tensor t({3}, DType::kUInt8);
    CHECK_THROWS_AS(t.set_requires_grad(true), DimensionError);
    CHECK_FALSE(t.has_grad());
  }

  TEST_CASE("grad must match shape and dtype") {
    Tensor t({2, 2}, DType::kFloat64);
    CHECK_THROWS(t.set_grad(Tensor({4}, DType::kFloat64)));
    CHECK_THROWS(t.set_grad(Tensor({2, 2}, DType::kFloat32)));
    t.set_grad(Tensor({2, 2}, DType::kFloat64));
    CHECK(t.has_grad());
  }

  TEST_CASE("copies are deep") {
    Tensor a = Tensor::from<float>({2}, {1, 2});
    Tensor b = a;
    b.data<float>()[0] = 7;
    CHECK(a.item(0) == 1.0);
  }

  TEST_CASE("wrong dtype access throws") {
    Tensor t({2}, DType::kFloat32);
    CHECK_THROWS_AS(t.data<double>(), DimensionError);
  }

  TEST_CASE("rows, slice0, stack and reshaped agree") {
    Tensor t = oracle::random_tensor({4, 2, 3}, 1);
    Tensor r = t.rows(1, 3);
    CHECK(r.shape() == Shape{2, 2, 3});
    CHECK(r.item(0) == t.item(6));
    Tensor s = t.slice0(2);
    CHECK(s.shape() == Shape{2, 3});
    CHECK(s.item(5) == t.item(17));
    std::vector<Tensor> parts{t.slice0(0), t.slice0(1), t.slice0(2), t.slice0(3)};
    CHECK(stack(parts).bitwise_equal(t));
    CHECK(t.reshaped({24}).shape() == Shape{24});
    CHECK_THROWS_AS(t.reshaped({5}), DimensionError);
  }

  TEST_CASE("dtype conversion preserves values") {
    Tensor t = Tensor::from<std::uint8_t>({3}, {0, 128, 255});
    Tensor f = t.to(DType::kFloat32);
    CHECK(f.item(2) == 255.0);
    CHECK(f.to(DType::kUInt8).bitwise_equal(t));
  }

  TEST_CASE("float64 gemm equals the direct-summation product for every transpose") {
    const std::size_t m = 7, n = 5, k = 9;
    Tensor a = oracle::random_tensor({m, k}, 2), b = oracle::random_tensor({k, n}, 3);
    std::vector<double> av(a.data<double>().begin(), a.data<double>().end());
    std::vector<double> bv(b.data<double>().begin(), b.data<double>().end());
    const std::vector<double> ref = oracle::matmul(av, bv, m, k, n);
    std::vector<double> at(k * m), bt(n * k);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) at[p * m + i] = av[i * k + p];
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bv[p * n + j];
    for (int ta = 0; ta < 2; ++ta)
      for (int tb = 0; tb < 2; ++tb) {
        std::vector<double> c(m * n, 0.0);
        gemm(ta ? Trans::kYes : Trans::kNo, tb ? Trans::kYes : Trans::kNo, m, n, k, 1.0,
             ta ? at.data() : av.data(), ta ? m : k, tb ? bt.data() : bv.data(), tb ? k : n, 0.0,
             c.data(), n);
        CHECK(c == ref);
      }
  }

  TEST_CASE("gemm beta accumulates") {
    std::vector<double> a{1, 2}, b{3, 4}, c{10};
    gemm(Trans::kNo, Trans::kNo, 1, 1, 2, 1.0, a.data(), 2, b.data(), 1, 1.0, c.data(), 1);
    CHECK(c[0] == 21.0);
  }

  TEST_CASE("float32 gemm is close to the double oracle") {
    const std::size_t m = 33, n = 17, k = 65;
    Tensor a = oracle::random_tensor({m, k}, 4, -1, 1, DType::kFloat32);
    Tensor b = oracle::random_tensor({k, n}, 5, -1, 1, DType::kFloat32);
    std::vector<double> av, bv;
    for (float v : a.data<float>()) av.push_back(v);
    for (float v : b.data<float>()) bv.push_back(v);
    const std::vector<double> ref = oracle::matmul(av, bv, m, k, n);
    std::vector<float> c(m * n);
    gemm(Trans::kNo, Trans::kNo, m, n, k, 1.0f, a.data<float>().data(), k,
         b.data<float>().data(), n, 0.0f, c.data(), n);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c[i] - ref[i]) < 1e-4);
  }
}
