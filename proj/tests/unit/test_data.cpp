#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "defnet/data.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace defnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("defnet_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<std::uint8_t> idx_images(std::uint32_t magic, std::size_t n, std::size_t side,
                                     std::uint64_t seed) {
  std::vector<std::uint8_t> b;
  put_be32(b, magic);
  put_be32(b, static_cast<std::uint32_t>(n));
  put_be32(b, static_cast<std::uint32_t>(side));
  put_be32(b, static_cast<std::uint32_t>(side));
  const Tensor px = oracle::random_pixels({n * side * side}, seed);
  for (std::uint8_t v : px.data<std::uint8_t>()) b.push_back(v);
  return b;
}

std::vector<std::uint8_t> idx_labels(std::size_t n) {
  std::vector<std::uint8_t> b;
  put_be32(b, 0x801);
  put_be32(b, static_cast<std::uint32_t>(n));
  for (std::size_t i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>((i * 7) % 10));
  return b;
}

template <class Fn>
DataError::Kind error_kind(Fn&& fn, std::uint64_t* offset = nullptr) {
  try {
    fn();
  } catch (const DataError& e) {
    if (offset) *offset = e.offset();
    return e.kind();
  }
  FAIL("expected a DataError");
  return DataError::Kind::kIo;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("IDX pair loads bit-exactly, twice identically") {
    const fs::path d = scratch("idx_ok");
    const auto img = idx_images(0x803, 12, 28, 1);
    write_bytes(d / "img", img);
    write_bytes(d / "lbl", idx_labels(12));
    const Dataset a = load_idx(d / "img", d / "lbl", "train");
    const Dataset b = load_idx(d / "img", d / "lbl", "train");
    CHECK(a.images.shape() == Shape{12, 1, 28, 28});
    CHECK(a.images.bitwise_equal(b.images));
    CHECK(a.labels == b.labels);
    auto px = a.images.data<std::uint8_t>();
    CHECK(std::equal(px.begin(), px.end(), img.begin() + 16));
    for (int l : a.labels) CHECK((l >= 0 && l < 10));
  }

  TEST_CASE("IDX errors are distinct and carry offsets") {
    const fs::path d = scratch("idx_bad");
    write_bytes(d / "lbl", idx_labels(12));
    write_bytes(d / "zero", idx_images(0x0, 12, 28, 1));
    CHECK(error_kind([&] { load_idx(d / "zero", d / "lbl", "t"); }) == DataError::Kind::kBadMagic);
    auto img = idx_images(0x803, 12, 28, 1);
    img.resize(img.size() - 100);
    write_bytes(d / "short", img);
    std::uint64_t offset = 0;
    CHECK(error_kind([&] { load_idx(d / "short", d / "lbl", "t"); }, &offset) ==
          DataError::Kind::kTruncated);
    CHECK(offset == img.size());
    CHECK(error_kind([&] { load_idx(d / "missing", d / "lbl", "t"); }) ==
          DataError::Kind::kMissingFile);
    write_bytes(d / "img", idx_images(0x803, 12, 28, 1));
    auto lbl = idx_labels(12);
    lbl.back() = 42;
    write_bytes(d / "badlbl", lbl);
    CHECK(error_kind([&] { load_idx(d / "img", d / "badlbl", "t"); }, &offset) ==
          DataError::Kind::kMalformed);
    CHECK(offset == 8 + 11);
  }

  TEST_CASE("load_mnist reads the four standard files and shares the train mean") {
    const fs::path d = scratch("mnist");
    write_bytes(d / "train-images-idx3-ubyte", idx_images(0x803, 20, 28, 2));
    write_bytes(d / "train-labels-idx1-ubyte", idx_labels(20));
    write_bytes(d / "t10k-images-idx3-ubyte", idx_images(0x803, 5, 28, 3));
    write_bytes(d / "t10k-labels-idx1-ubyte", idx_labels(5));
    const DatasetPair p = load_mnist(d);
    CHECK(p.train.size() == 20);
    CHECK(p.test.size() == 5);
    CHECK(p.test.per_pixel_mean.bitwise_equal(p.train.per_pixel_mean));
    CHECK(p.train.per_pixel_mean.bitwise_equal(per_pixel_mean(p.train.images)));
  }

  TEST_CASE("CIFAR-10 batches") {
    const fs::path d = scratch("cifar");
    std::vector<std::uint8_t> b;
    for (std::size_t r = 0; r < 3; ++r) {
      b.push_back(static_cast<std::uint8_t>(r == 1 ? 7 : r));
      for (std::size_t i = 0; i < 3072; ++i) b.push_back(static_cast<std::uint8_t>((i + r) % 251));
    }
    write_bytes(d / "batch.bin", b);
    const Dataset ds = load_cifar10_batch(d / "batch.bin", "train");
    CHECK(ds.size() == 3);
    CHECK(ds.images.shape() == Shape{3, 3, 32, 32});
    CHECK(ds.labels[1] == 7);
    CHECK(ds.images.item(3072 + 5) == static_cast<double>((5 + 1) % 251));
    write_bytes(d / "short.bin", std::vector<std::uint8_t>(3072, 1));
    CHECK(error_kind([&] { load_cifar10_batch(d / "short.bin", "t"); }) == DataError::Kind::kTruncated);
  }

  TEST_CASE("mean subtraction centers the training set") {
    const Dataset ds = fixture::quadrant_dataset(300, 4);
    const Tensor centered = subtract_mean(ds.images, ds.per_pixel_mean);
    const std::size_t d = 64;
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < ds.size(); ++i) s += centered.item(i * d + j);
      CHECK(std::abs(s / static_cast<double>(ds.size())) < 1e-4);
    }
  }

  TEST_CASE("augment keeps the pixel count and crops inside the padded image") {
    Rng rng = make_rng(1);
    const Tensor img = oracle::random_pixels({3, 32, 32}, 5);
    const AugmentConfig cfg{4, 32, true, 0};
    for (int i = 0; i < 20; ++i) CHECK(augment(img, cfg, rng).shape() == Shape{3, 32, 32});
    const AugmentConfig none{0, 32, false, 0};
    CHECK(augment(img, none, rng).bitwise_equal(img));
    CHECK_THROWS_AS(AugmentConfig({4, 41, true, 0}).validate({3, 32, 32}), ConfigError);
  }

  TEST_CASE("augment output is a shifted window of the zero-padded image") {
    const Tensor img = oracle::random_pixels({1, 6, 6}, 6);
    const AugmentConfig cfg{2, 6, false, 0};
    Rng rng = make_rng(3);
    for (int t = 0; t < 10; ++t) {
      const Tensor out = augment(img, cfg, rng);
      bool found = false;
      for (int dy = -2; dy <= 2 && !found; ++dy)
        for (int dx = -2; dx <= 2 && !found; ++dx) {
          bool ok = true;
          for (int r = 0; r < 6 && ok; ++r)
            for (int c = 0; c < 6 && ok; ++c) {
              const int sr = r + dy, sc = c + dx;
              const double expect = (sr < 0 || sc < 0 || sr >= 6 || sc >= 6) ? 0.0 : img.item(sr * 6 + sc);
              ok = out.item(r * 6 + c) == expect;
            }
          found = ok;
        }
      CHECK(found);
    }
  }

  TEST_CASE("hflip is an involution") {
    const Tensor img = oracle::random_pixels({3, 5, 7}, 7);
    CHECK(hflip(hflip(img)).bitwise_equal(img));
    CHECK(hflip(img).item(0) == img.item(6));
  }

  TEST_CASE("patch_shuffle examples and inverse") {
    const Tensor img = oracle::random_pixels({3, 8, 8}, 8);
    CHECK(patch_shuffle(img, 1, 42).bitwise_equal(img));
    const Tensor s = patch_shuffle(img, 4, 42);
    auto a = std::vector<std::uint8_t>(img.data<std::uint8_t>().begin(), img.data<std::uint8_t>().end());
    auto b = std::vector<std::uint8_t>(s.data<std::uint8_t>().begin(), s.data<std::uint8_t>().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    CHECK(patch_shuffle(img, 4, 42).bitwise_equal(s));
    const auto perm = random_permutation(16, 9);
    const Tensor moved = permute_patches(img, 4, perm);
    CHECK(permute_patches(moved, 4, inverse_permutation(perm)).bitwise_equal(img));
    CHECK_THROWS_AS(patch_shuffle(img, 3, 1), ConfigError);
  }

  TEST_CASE("patches keep their interior pixels") {
    const Tensor img = oracle::random_pixels({1, 4, 4}, 10);
    const std::vector<std::size_t> perm{3, 2, 1, 0};
    const Tensor out = permute_patches(img, 2, perm);
    // slot 0 (top-left) receives patch 3 (bottom-right)
    CHECK(out.item(0) == img.item(10));
    CHECK(out.item(1) == img.item(11));
    CHECK(out.item(4) == img.item(14));
    CHECK(out.item(5) == img.item(15));
  }

  TEST_CASE("random_permutation is a permutation; inverse rejects non-permutations") {
    auto p = random_permutation(50, 3);
    auto q = p;
    std::sort(q.begin(), q.end());
    for (std::size_t i = 0; i < 50; ++i) CHECK(q[i] == i);
    CHECK(random_permutation(50, 3) == p);
    CHECK_THROWS(inverse_permutation({0, 0, 1}));
  }

  TEST_CASE("stratified subsets take the first samples of each class") {
    const Dataset ds = fixture::quadrant_dataset(30, 11, 8, 3);
    const auto idx = stratified_indices(ds, 7);
    CHECK(idx.size() == 7);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    std::map<int, int> counts;
    for (std::size_t i : idx) ++counts[ds.labels[i]];
    CHECK(counts[0] == 3);
    CHECK(counts[1] == 2);
    CHECK(counts[2] == 2);
    CHECK(idx == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
    const Dataset sub = stratified_subset(ds, 7);
    CHECK(sub.size() == 7);
    CHECK(sub.per_pixel_mean.bitwise_equal(ds.per_pixel_mean));
  }
}
