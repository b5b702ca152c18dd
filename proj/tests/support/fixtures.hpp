#pragma once

#include <random>

#include "defnet/data.hpp"
#include "defnet/models.hpp"

namespace fixture {

// resnet_small layout at 8x8 input with narrow widths; fast enough for
// float64 finite differences.
inline defnet::ModelSpec tiny_spec(std::uint64_t seed = 0) {
  defnet::ModelSpec s = defnet::resnet_small_spec({1, 8, 8}, 3);
  s.blocks = {{4, 1, 1}, {4, 1, 2}, {6, 2, 2}, {8, 2, 2}, {8, 2, 2}};
  s.master_seed = seed;
  return s;
}

inline defnet::ModelSpec tiny_defective(std::uint64_t seed = 0, double p = 0.5) {
  defnet::ModelSpec s = tiny_spec(seed);
  s.mask_blocks = {0, 1, 2};
  s.keep_prob = p;
  return s;
}

// Four-class toy images: class c lights up quadrant c with noise elsewhere.
inline defnet::Dataset quadrant_dataset(std::size_t n, std::uint64_t seed, std::size_t side = 8,
                                        std::size_t classes = 3) {
  std::mt19937_64 gen(seed);
  defnet::Dataset ds;
  ds.images = defnet::Tensor({n, 1, side, side}, defnet::DType::kUInt8);
  ds.num_classes = classes;
  ds.split = "toy";
  auto px = ds.images.data<std::uint8_t>();
  const std::size_t h = side / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);
    ds.labels.push_back(c);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t q = 0; q < side; ++q) {
        const std::size_t quad = (r >= h) * 2 + (q >= h);
        const unsigned base = quad == static_cast<std::size_t>(c) ? 170 : 20;
        px[(i * side + r) * side + q] = static_cast<std::uint8_t>(base + gen() % 60);
      }
  }
  ds.per_pixel_mean = defnet::per_pixel_mean(ds.images);
  return ds;
}

}  // namespace fixture
