#pragma once

// Independent reference implementations used as test oracles. Written for
// clarity, not speed; nothing here calls into the library's kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "defnet/tensor.hpp"

namespace oracle {

using defnet::Shape;
using defnet::Tensor;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            defnet::DType dtype = defnet::DType::kFloat64) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape), dtype);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double v = dist(gen);
    if (dtype == defnet::DType::kFloat64) {
      t.data<double>()[i] = v;
    } else {
      t.data<float>()[i] = static_cast<float>(v);
    }
  }
  return t;
}

inline Tensor random_pixels(Shape shape, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Tensor t(std::move(shape), defnet::DType::kUInt8);
  for (auto& v : t.data<std::uint8_t>()) v = static_cast<std::uint8_t>(gen() % 256);
  return t;
}

// Direct-summation cross-correlation, channel-major then kernel row/col.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                     std::size_t pad) {
  const std::size_t B = x.dim(0), K = x.dim(1), M = x.dim(2), N = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Mo = (M + 2 * pad - kh) / stride + 1, No = (N + 2 * pad - kw) / stride + 1;
  Tensor y({B, O, Mo, No}, defnet::DType::kFloat64);
  auto out = y.data<double>();
  auto xs = x.data<double>();
  auto ws = w.data<double>();
  auto bs = b.data<double>();
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Mo; ++i)
        for (std::size_t j = 0; j < No; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < K; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(M) || q >= static_cast<long>(N)) continue;
                acc += xs[((n * K + c) * M + r) * N + q] * ws[((o * K + c) * kh + u) * kw + v];
              }
          out[((n * O + o) * Mo + i) * No + j] = acc + bs[o];
        }
  return y;
}

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

}  // namespace oracle
