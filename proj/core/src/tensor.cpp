#include "defnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "defnet/rng.hpp"

namespace defnet {

const char* to_string(DType dtype) {
  switch (dtype) {
    case DType::kFloat32:
      return "float32";
    case DType::kFloat64:
      return "float64";
    case DType::kUInt8:
      return "uint8";
  }
  return "?";
}

const char* to_string(DataError::Kind kind) {
  switch (kind) {
    case DataError::Kind::kMissingFile:
      return "missing file";
    case DataError::Kind::kBadMagic:
      return "bad magic";
    case DataError::Kind::kTruncated:
      return "truncated";
    case DataError::Kind::kVersionMismatch:
      return "version mismatch";
    case DataError::Kind::kChecksumMismatch:
      return "checksum mismatch";
    case DataError::Kind::kMalformed:
      return "malformed";
    case DataError::Kind::kIo:
      return "i/o error";
  }
  return "?";
}

DataError::DataError(Kind kind, std::string path, std::uint64_t offset,
                     const std::string& detail)
    : Error(std::string(to_string(kind)) + ": " + path + " at byte " +
            std::to_string(offset) + (detail.empty() ? "" : ": " + detail)),
      kind_(kind),
      path_(std::move(path)),
      offset_(offset) {}

double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = Rng::max() - Rng::max() % n;
  std::uint64_t v = rng();
  while (v >= limit) v = rng();
  return v % n;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, DType dtype)
    : shape_(std::move(shape)), numel_(shape_numel(shape_)), dtype_(dtype) {
  switch (dtype) {
    case DType::kFloat32:
      storage_ = std::vector<float>(numel_, 0.0f);
      break;
    case DType::kFloat64:
      storage_ = std::vector<double>(numel_, 0.0);
      break;
    case DType::kUInt8:
      storage_ = std::vector<std::uint8_t>(numel_, 0);
      break;
  }
}

Tensor::Tensor(const Tensor& other)
    : shape_(other.shape_),
      numel_(other.numel_),
      dtype_(other.dtype_),
      storage_(other.storage_),
      requires_grad_(other.requires_grad_),
      grad_(other.grad_ ? std::make_unique<Tensor>(*other.grad_) : nullptr) {}

Tensor& Tensor::operator=(const Tensor& other) {
  if (this != &other) {
    Tensor copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) {
    throw DimensionError("dim " + std::to_string(i) + " out of range for shape " +
                         shape_string(shape_));
  }
  return shape_[i];
}

void Tensor::check_dtype(DType expected) const {
  if (dtype_ != expected) {
    throw DimensionError(std::string("tensor dtype is ") + to_string(dtype_) +
                         ", accessed as " + to_string(expected));
  }
}

double Tensor::item(std::size_t flat_index) const {
  if (flat_index >= numel_) throw DimensionError("item index out of range");
  return std::visit([&](const auto& v) { return static_cast<double>(v[flat_index]); },
                    storage_);
}

void Tensor::set_item(std::size_t flat_index, double value) {
  if (flat_index >= numel_) throw DimensionError("item index out of range");
  std::visit([&](auto& v) { v[flat_index] = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); },
             storage_);
}

double Tensor::item() const {
  if (numel_ != 1) {
    throw DimensionError("item() on tensor with " + std::to_string(numel_) +
                         " elements");
  }
  return item(0);
}

void Tensor::set_requires_grad(bool value) {
  if (value && dtype_ == DType::kUInt8) {
    throw DimensionError("uint8 tensors cannot require gradients");
  }
  requires_grad_ = value;
}

const Tensor& Tensor::grad() const {
  if (!grad_) throw TapeError("tensor has no gradient");
  return *grad_;
}

void Tensor::set_grad(Tensor grad) {
  if (dtype_ == DType::kUInt8) {
    throw DimensionError("uint8 tensors never carry gradients");
  }
  if (grad.shape() != shape_ || grad.dtype() != dtype_) {
    throw DimensionError("gradient shape " + shape_string(grad.shape()) +
                         " does not match tensor shape " + shape_string(shape_));
  }
  grad_ = std::make_unique<Tensor>(std::move(grad));
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) {
    Tensor copy(*this);
    copy.grad_.reset();
    copy.requires_grad_ = false;
    return copy;
  }
  Tensor out(shape_, dtype);
  std::visit(
      [&](const auto& src) {
        std::visit(
            [&](auto& dst) {
              using D = typename std::decay_t<decltype(dst)>::value_type;
              for (std::size_t i = 0; i < src.size(); ++i) {
                if constexpr (std::is_same_v<D, std::uint8_t>) {
                  const double v = std::clamp(std::nearbyint(static_cast<double>(src[i])),
                                              0.0, 255.0);
                  dst[i] = static_cast<std::uint8_t>(v);
                } else {
                  dst[i] = static_cast<D>(src[i]);
                }
              }
            },
            out.storage_);
      },
      storage_);
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel_) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                         shape_string(shape));
  }
  Tensor out(*this);
  out.shape_ = std::move(shape);
  out.grad_.reset();
  out.requires_grad_ = false;
  return out;
}

Tensor Tensor::slice0(std::size_t i) const {
  Tensor r = rows(i, i + 1);
  Shape s(shape_.begin() + 1, shape_.end());
  r.shape_ = std::move(s);
  return r;
}

Tensor Tensor::rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) {
    throw DimensionError("rows [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for shape " + shape_string(shape_));
  }
  const std::size_t row = shape_[0] == 0 ? 0 : numel_ / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  Tensor out(s, dtype_);
  std::visit(
      [&](const auto& src) {
        auto& dst = std::get<std::decay_t<decltype(src)>>(out.storage_);
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(begin * row),
                  src.begin() + static_cast<std::ptrdiff_t>(end * row), dst.begin());
      },
      storage_);
  return out;
}

void Tensor::fill(double value) {
  std::visit(
      [&](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::fill(v.begin(), v.end(), static_cast<T>(value));
      },
      storage_);
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  return std::visit(
      [&](const auto& a) {
        const auto& b = std::get<std::decay_t<decltype(a)>>(other.storage_);
        return a.empty() ||
               std::memcmp(a.data(), b.data(), a.size() * sizeof(a[0])) == 0;
      },
      storage_);
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw DimensionError("stack of zero tensors");
  const Shape& inner = items[0].shape();
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape, items[0].dtype());
  const std::size_t n = items[0].numel();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != inner || items[i].dtype() != items[0].dtype()) {
      throw DimensionError("stack: mismatched item " + std::to_string(i));
    }
    switch (out.dtype()) {
      case DType::kFloat32: {
        auto src = items[i].data<float>();
        std::copy(src.begin(), src.end(), out.data<float>().begin() + i * n);
        break;
      }
      case DType::kFloat64: {
        auto src = items[i].data<double>();
        std::copy(src.begin(), src.end(), out.data<double>().begin() + i * n);
        break;
      }
      case DType::kUInt8: {
        auto src = items[i].data<std::uint8_t>();
        std::copy(src.begin(), src.end(), out.data<std::uint8_t>().begin() + i * n);
        break;
      }
    }
  }
  return out;
}

}  // namespace defnet
