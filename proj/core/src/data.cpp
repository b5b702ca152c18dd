#include "defnet/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace defnet {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw DataError(DataError::Kind::kMissingFile, path.string(), 0, "no such file");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::kIo, path.string(), 0, "cannot open");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError(DataError::Kind::kIo, path.string(), bytes.size(), "read failed");
  return bytes;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off,
                        const std::filesystem::path& path) {
  if (off + 4 > b.size()) {
    throw DataError(DataError::Kind::kTruncated, path.string(), b.size(),
                    "header ends before byte " + std::to_string(off + 4));
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void check_magic(const std::vector<std::uint8_t>& b, std::uint32_t expected,
                 const std::filesystem::path& path) {
  const std::uint32_t magic = read_be32(b, 0, path);
  if (magic != expected) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "magic 0x%08x, expected 0x%08x", magic, expected);
    throw DataError(DataError::Kind::kBadMagic, path.string(), 0, buf);
  }
}

void require_payload(const std::vector<std::uint8_t>& b, std::size_t need,
                     const std::filesystem::path& path) {
  if (b.size() < need) {
    throw DataError(DataError::Kind::kTruncated, path.string(), b.size(),
                    "payload needs " + std::to_string(need) + " bytes");
  }
  if (b.size() > need) {
    throw DataError(DataError::Kind::kMalformed, path.string(), need,
                    std::to_string(b.size() - need) + " trailing bytes");
  }
}

}  // namespace

void Dataset::validate() const {
  if (images.dtype() != DType::kUInt8 || images.rank() != 4) {
    throw DimensionError("dataset images must be uint8 [n,K,M,N]");
  }
  if (images.dim(0) != labels.size()) {
    throw DimensionError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                         std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw DimensionError("dataset label " + std::to_string(l) + " out of range");
    }
  }
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::string split) {
  const auto ib = read_file(images);
  check_magic(ib, 0x00000803, images);
  const std::size_t n = read_be32(ib, 4, images);
  const std::size_t rows = read_be32(ib, 8, images);
  const std::size_t cols = read_be32(ib, 12, images);
  require_payload(ib, 16 + n * rows * cols, images);

  const auto lb = read_file(labels);
  check_magic(lb, 0x00000801, labels);
  const std::size_t nl = read_be32(lb, 4, labels);
  require_payload(lb, 8 + nl, labels);
  if (nl != n) {
    throw DataError(DataError::Kind::kMalformed, labels.string(), 4,
                    std::to_string(nl) + " labels for " + std::to_string(n) + " images");
  }

  Dataset ds;
  ds.split = std::move(split);
  ds.images = Tensor::from<std::uint8_t>({n, 1, rows, cols},
                                         std::vector<std::uint8_t>(ib.begin() + 16, ib.end()));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lb[8 + i] >= ds.num_classes) {
      throw DataError(DataError::Kind::kMalformed, labels.string(), 8 + i,
                      "label " + std::to_string(lb[8 + i]) + " out of range");
    }
    ds.labels[i] = lb[8 + i];
  }
  return ds;
}

DatasetPair load_mnist(const std::filesystem::path& dir) {
  DatasetPair p;
  p.train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", "train");
  p.test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", "test");
  p.train.per_pixel_mean = per_pixel_mean(p.train.images);
  p.test.per_pixel_mean = p.train.per_pixel_mean;
  return p;
}

Dataset load_cifar10_batch(const std::filesystem::path& file, std::string split) {
  constexpr std::size_t kRecord = 3073;
  const auto b = read_file(file);
  if (b.size() % kRecord != 0 || b.empty()) {
    throw DataError(DataError::Kind::kTruncated, file.string(), b.size() - b.size() % kRecord,
                    "size " + std::to_string(b.size()) + " is not a multiple of 3073");
  }
  const std::size_t n = b.size() / kRecord;
  Dataset ds;
  ds.split = std::move(split);
  ds.images = Tensor({n, 3, 32, 32}, DType::kUInt8);
  auto px = ds.images.data<std::uint8_t>();
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = b.data() + i * kRecord;
    if (rec[0] >= ds.num_classes) {
      throw DataError(DataError::Kind::kMalformed, file.string(), i * kRecord,
                      "label " + std::to_string(rec[0]) + " out of range");
    }
    ds.labels[i] = rec[0];
    std::copy(rec + 1, rec + kRecord, px.begin() + i * 3072);
  }
  return ds;
}

namespace {

Dataset concat(std::vector<Dataset> parts, std::string split) {
  std::size_t n = 0;
  for (const auto& d : parts) n += d.size();
  Shape shape = parts.front().images.shape();
  shape[0] = n;
  Dataset out;
  out.split = std::move(split);
  out.images = Tensor(shape, DType::kUInt8);
  auto dst = out.images.data<std::uint8_t>();
  std::size_t off = 0;
  for (const auto& d : parts) {
    auto src = d.images.data<std::uint8_t>();
    std::copy(src.begin(), src.end(), dst.begin() + off);
    off += src.size();
    out.labels.insert(out.labels.end(), d.labels.begin(), d.labels.end());
  }
  return out;
}

}  // namespace

DatasetPair load_cifar10(const std::filesystem::path& dir) {
  std::vector<Dataset> parts;
  for (int i = 1; i <= 5; ++i) {
    parts.push_back(load_cifar10_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"), "train"));
  }
  DatasetPair p;
  p.train = concat(std::move(parts), "train");
  p.test = load_cifar10_batch(dir / "test_batch.bin", "test");
  p.train.per_pixel_mean = per_pixel_mean(p.train.images);
  p.test.per_pixel_mean = p.train.per_pixel_mean;
  return p;
}

Tensor per_pixel_mean(const Tensor& images) {
  if (images.rank() < 2 || images.dim(0) == 0) {
    throw DimensionError("per_pixel_mean needs a non-empty [n,...] tensor");
  }
  const std::size_t n = images.dim(0);
  const std::size_t d = images.numel() / n;
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) acc[j] += images.item(i * d + j);
  Tensor mean(Shape(images.shape().begin() + 1, images.shape().end()));
  auto m = mean.data<float>();
  for (std::size_t j = 0; j < d; ++j) m[j] = static_cast<float>(acc[j] / static_cast<double>(n));
  return mean;
}

Tensor subtract_mean(const Tensor& images, const Tensor& mean) {
  if (images.rank() != mean.rank() + 1 ||
      Shape(images.shape().begin() + 1, images.shape().end()) != mean.shape()) {
    throw DimensionError("subtract_mean: images " + shape_string(images.shape()) +
                         " vs mean " + shape_string(mean.shape()));
  }
  Tensor out = images.to(DType::kFloat32);
  auto o = out.data<float>();
  const Tensor m32 = mean.to(DType::kFloat32);
  auto m = m32.data<float>();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= m[i % m.size()];
  return out;
}

Dataset select(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.split = ds.split;
  out.num_classes = ds.num_classes;
  out.per_pixel_mean = ds.per_pixel_mean;
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  out.images = Tensor(shape, DType::kUInt8);
  const std::size_t d = ds.images.numel() / std::max<std::size_t>(1, ds.size());
  auto src = ds.images.data<std::uint8_t>();
  auto dst = out.images.data<std::uint8_t>();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= ds.size()) throw DimensionError("select: index out of range");
    std::copy_n(src.begin() + indices[k] * d, d, dst.begin() + k * d);
    out.labels.push_back(ds.labels[indices[k]]);
  }
  return out;
}

std::vector<std::size_t> stratified_indices(const Dataset& ds, std::size_t n) {
  if (n >= ds.size()) {
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  const std::size_t c = ds.num_classes;
  std::vector<std::size_t> quota(c);
  for (std::size_t k = 0; k < c; ++k) quota[k] = n / c + (k < n % c ? 1 : 0);
  std::vector<bool> taken(ds.size(), false);
  std::size_t count = 0;
  for (std::size_t i = 0; i < ds.size() && count < n; ++i) {
    const auto l = static_cast<std::size_t>(ds.labels[i]);
    if (quota[l] > 0) {
      --quota[l];
      taken[i] = true;
      ++count;
    }
  }
  for (std::size_t i = 0; i < ds.size() && count < n; ++i) {
    if (!taken[i]) {
      taken[i] = true;
      ++count;
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (taken[i]) out.push_back(i);
  return out;
}

Dataset stratified_subset(const Dataset& ds, std::size_t n) {
  return select(ds, stratified_indices(ds, n));
}

void AugmentConfig::validate(const Shape& image_shape) const {
  if (image_shape.size() != 3) throw DimensionError("augment expects a [K,M,N] image");
  const std::size_t h = image_shape[1] + 2 * pad_width;
  const std::size_t w = image_shape[2] + 2 * pad_width;
  if (crop_size == 0 || crop_size > h || crop_size > w) {
    throw ConfigError("crop size " + std::to_string(crop_size) + " exceeds padded image " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
}

Tensor hflip(const Tensor& image) {
  if (image.rank() != 3 || image.dtype() != DType::kUInt8) {
    throw DimensionError("hflip expects a uint8 [K,M,N] image");
  }
  Tensor out = image;
  const std::size_t w = image.dim(2);
  auto src = image.data<std::uint8_t>();
  auto dst = out.data<std::uint8_t>();
  for (std::size_t r = 0; r < image.numel() / w; ++r)
    for (std::size_t x = 0; x < w; ++x) dst[r * w + x] = src[r * w + (w - 1 - x)];
  return out;
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  if (image.dtype() != DType::kUInt8) throw DimensionError("augment expects a uint8 image");
  cfg.validate(image.shape());
  const std::size_t k = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t ph = h + 2 * cfg.pad_width, pw = w + 2 * cfg.pad_width;
  const std::size_t oy = uniform_index(rng, ph - cfg.crop_size + 1);
  const std::size_t ox = uniform_index(rng, pw - cfg.crop_size + 1);
  const bool flip = cfg.hflip && uniform01(rng) < 0.5;
  Tensor out({k, cfg.crop_size, cfg.crop_size}, DType::kUInt8);
  auto src = image.data<std::uint8_t>();
  auto dst = out.data<std::uint8_t>();
  const std::size_t cs = cfg.crop_size;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t y = 0; y < cs; ++y) {
      for (std::size_t x = 0; x < cs; ++x) {
        // Coordinates in the padded frame, then back in the source image.
        const std::size_t py = oy + y, px = ox + (flip ? cs - 1 - x : x);
        std::uint8_t v = 0;
        if (py >= cfg.pad_width && py < cfg.pad_width + h && px >= cfg.pad_width &&
            px < cfg.pad_width + w) {
          v = src[(c * h + (py - cfg.pad_width)) * w + (px - cfg.pad_width)];
        }
        dst[(c * cs + y) * cs + x] = v;
      }
    }
  }
  return out;
}

std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng = make_rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  return perm;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size(), perm.size());
  for (std::size_t j = 0; j < perm.size(); ++j) {
    if (perm[j] >= perm.size() || inv[perm[j]] != perm.size()) {
      throw ConfigError("not a permutation");
    }
    inv[perm[j]] = j;
  }
  return inv;
}

Tensor permute_patches(const Tensor& image, std::size_t k, const std::vector<std::size_t>& perm) {
  if (image.rank() != 3) throw DimensionError("patch shuffle expects a [K,M,N] image");
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw ConfigError("patch grid " + std::to_string(k) + " does not divide " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  if (perm.size() != k * k) throw ConfigError("patch permutation has the wrong length");
  inverse_permutation(perm);
  const std::size_t ph = h / k, pw = w / k;
  Tensor out = image;
  auto copy = [&]<class T>() {
    auto src = image.data<T>();
    auto dst = out.data<T>();
    for (std::size_t j = 0; j < k * k; ++j) {
      const std::size_t sy = (perm[j] / k) * ph, sx = (perm[j] % k) * pw;
      const std::size_t dy = (j / k) * ph, dx = (j % k) * pw;
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = 0; y < ph; ++y)
          std::copy_n(src.begin() + (c * h + sy + y) * w + sx, pw,
                      dst.begin() + (c * h + dy + y) * w + dx);
    }
  };
  switch (image.dtype()) {
    case DType::kUInt8: copy.template operator()<std::uint8_t>(); break;
    case DType::kFloat32: copy.template operator()<float>(); break;
    case DType::kFloat64: copy.template operator()<double>(); break;
  }
  return out;
}

Tensor patch_shuffle(const Tensor& image, std::size_t k, std::uint64_t seed) {
  return permute_patches(image, k, random_permutation(k * k, seed));
}

}  // namespace defnet
