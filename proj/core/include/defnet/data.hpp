#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "defnet/rng.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

struct Dataset {
  Tensor images;            // uint8 [n,K,M,N], 0-255
  std::vector<int> labels;  // [n]
  std::string split;        // "train" / "test" / derived tags
  std::size_t num_classes = 10;
  Tensor per_pixel_mean;    // float32 [K,M,N], from the train split

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  void validate() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// Single IDX image/label file pair (magics 0x803 / 0x801).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::string split);
// {train,t10k}-{images-idx3,labels-idx1}-ubyte under `dir`. Both splits carry
// the train-split per-pixel mean.
DatasetPair load_mnist(const std::filesystem::path& dir);

// One binary batch of 3073-byte records (label byte + planar RGB 32x32).
Dataset load_cifar10_batch(const std::filesystem::path& file, std::string split);
// data_batch_{1..5}.bin + test_batch.bin under `dir`.
DatasetPair load_cifar10(const std::filesystem::path& dir);

// Float32 mean over the leading axis of a uint8 [n,...] tensor.
Tensor per_pixel_mean(const Tensor& images);
// images (uint8 or float [n,K,M,N]) minus mean [K,M,N], as float32.
Tensor subtract_mean(const Tensor& images, const Tensor& mean);

Dataset select(const Dataset& ds, const std::vector<std::size_t>& indices);
// First ceil/floor(n / classes) samples of each class in file order (lower
// classes take the remainder), topped up in file order if a class runs short.
// Returned indices are ascending.
std::vector<std::size_t> stratified_indices(const Dataset& ds, std::size_t n);
Dataset stratified_subset(const Dataset& ds, std::size_t n);

struct AugmentConfig {
  std::size_t pad_width = 4;
  std::size_t crop_size = 32;
  bool hflip = true;
  std::uint64_t seed = 0;

  void validate(const Shape& image_shape) const;
};

// Zero-pad, random crop, random horizontal flip of one uint8 [K,M,N] image.
// Mean subtraction happens in the model's input layer, so the result stays in
// pixel space.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng);
Tensor hflip(const Tensor& image);

// Uniform random permutation of n items (Fisher-Yates).
std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);
// Output patch slot j receives input patch perm[j]; patches are in row-major
// grid order. Works for any dtype, [K,M,N].
Tensor permute_patches(const Tensor& image, std::size_t k, const std::vector<std::size_t>& perm);
Tensor patch_shuffle(const Tensor& image, std::size_t k, std::uint64_t seed);

}  // namespace defnet
