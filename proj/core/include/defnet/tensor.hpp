#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "defnet/error.hpp"

namespace defnet {

enum class DType : std::uint8_t { kFloat32, kFloat64, kUInt8 };

const char* to_string(DType dtype);

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::kFloat32;
  } else if constexpr (std::is_same_v<T, double>) {
    return DType::kFloat64;
  } else {
    static_assert(std::is_same_v<T, std::uint8_t>, "unsupported element type");
    return DType::kUInt8;
  }
}

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major n-dimensional array. Copies are deep. A float tensor may
// carry a gradient of identical shape and dtype; uint8 tensors never do.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::kFloat32);

  template <class T>
  static Tensor from(Shape shape, std::vector<T> values);

  template <class T>
  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape), dtype_of<T>());
    for (T& v : t.data<T>()) v = value;
    return t;
  }

  Tensor(const Tensor& other);
  Tensor& operator=(const Tensor& other);
  Tensor(Tensor&&) noexcept = default;
  Tensor& operator=(Tensor&&) noexcept = default;
  ~Tensor() = default;

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return numel_; }
  DType dtype() const { return dtype_; }
  bool is_float() const { return dtype_ != DType::kUInt8; }
  bool empty() const { return numel_ == 0 && shape_.empty(); }

  template <class T>
  std::span<T> data() {
    check_dtype(dtype_of<T>());
    auto& v = std::get<std::vector<T>>(storage_);
    return {v.data(), v.size()};
  }
  template <class T>
  std::span<const T> data() const {
    check_dtype(dtype_of<T>());
    const auto& v = std::get<std::vector<T>>(storage_);
    return {v.data(), v.size()};
  }

  // Element read converted to double; convenient in tests and reports.
  double item(std::size_t flat_index) const;
  double item() const;
  // Element write; converts with a plain cast.
  void set_item(std::size_t flat_index, double value);

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool value);

  bool has_grad() const { return grad_ != nullptr; }
  const Tensor& grad() const;
  void set_grad(Tensor grad);
  void clear_grad() { grad_.reset(); }

  Tensor to(DType dtype) const;
  Tensor reshaped(Shape shape) const;
  // Sample `i` along the leading axis, with that axis removed.
  Tensor slice0(std::size_t i) const;
  // Rows [begin, end) along the leading axis, axis kept.
  Tensor rows(std::size_t begin, std::size_t end) const;
  void fill(double value);

  // Same shape, dtype, and bit pattern of the payload.
  bool bitwise_equal(const Tensor& other) const;

 private:
  void check_dtype(DType expected) const;

  using Storage = std::variant<std::vector<float>, std::vector<double>,
                               std::vector<std::uint8_t>>;

  Shape shape_;
  std::size_t numel_ = 0;
  DType dtype_ = DType::kFloat32;
  Storage storage_;
  bool requires_grad_ = false;
  std::unique_ptr<Tensor> grad_;
};

// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

template <class T>
Tensor Tensor::from(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  Tensor t;
  t.numel_ = values.size();
  t.shape_ = std::move(shape);
  t.dtype_ = dtype_of<T>();
  t.storage_ = std::move(values);
  return t;
}

// Calls `fn.template operator()<T>()` with T = float or double matching
// `dtype`; uint8 is rejected.
template <class Fn>
decltype(auto) dispatch_float(DType dtype, Fn&& fn) {
  switch (dtype) {
    case DType::kFloat32:
      return fn.template operator()<float>();
    case DType::kFloat64:
      return fn.template operator()<double>();
    default:
      throw DimensionError("operation requires a floating-point tensor");
  }
}

}  // namespace defnet
