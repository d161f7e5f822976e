#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace caf {

using Index = Eigen::Index;

/// Raised when operand shapes or hyperparameters are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// (batch, channel, height, width)
struct Shape4 {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  constexpr Index count() const { return n * c * h * w; }
  constexpr Index plane() const { return h * w; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

std::string to_string(const Shape4& s);
std::ostream& operator<<(std::ostream& os, const Shape4& s);

/// Dense rank-4 tensor stored contiguously in row-major (n, c, h, w) order.
template <typename Scalar>
class Tensor4 {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using value_type = Scalar;

  Tensor4() : Tensor4(Shape4{}) {}

  explicit Tensor4(const Shape4& shape) : shape_(checked(shape)), data_(Storage::Zero(shape.count())) {}

  Tensor4(const Shape4& shape, Storage data) : shape_(checked(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.count()) {
      throw ShapeError("Tensor4: data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor4 zeros(const Shape4& shape) { return Tensor4(shape); }

  static Tensor4 constant(const Shape4& shape, Scalar value) {
    return Tensor4(shape, Storage::Constant(shape.count(), value));
  }

  template <typename Rng>
  static Tensor4 uniform(const Shape4& shape, Scalar lo, Scalar hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    Tensor4 t(shape);
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  const Shape4& shape() const { return shape_; }
  Index n() const { return shape_.n; }
  Index c() const { return shape_.c; }
  Index h() const { return shape_.h; }
  Index w() const { return shape_.w; }
  Index size() const { return data_.size(); }

  Index offset(Index in, Index ic, Index ih, Index iw) const {
    return ((in * shape_.c + ic) * shape_.h + ih) * shape_.w + iw;
  }

  Scalar& operator()(Index in, Index ic, Index ih, Index iw) { return data_[offset(in, ic, ih, iw)]; }
  Scalar operator()(Index in, Index ic, Index ih, Index iw) const { return data_[offset(in, ic, ih, iw)]; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  /// Pointer to the (h, w) plane of item `in`, channel `ic`.
  Scalar* plane(Index in, Index ic) { return data_.data() + offset(in, ic, 0, 0); }
  const Scalar* plane(Index in, Index ic) const { return data_.data() + offset(in, ic, 0, 0); }

  /// Same elements, same order, new shape.
  Tensor4 reshaped(const Shape4& shape) const {
    if (shape.count() != shape_.count()) {
      throw ShapeError("reshape: " + to_string(shape_) + " -> " + to_string(shape) + " changes element count");
    }
    return Tensor4(shape, data_);
  }

  template <typename Other>
  Tensor4<Other> cast() const {
    return Tensor4<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor4& a, const Tensor4& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  static const Shape4& checked(const Shape4& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw ShapeError("Tensor4: all dims must be >= 1, got " + to_string(s));
    }
    return s;
  }

  Shape4 shape_;
  Storage data_;
};

/// Largest absolute elementwise difference; shapes must agree.
template <typename Scalar>
Scalar max_abs_diff(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  return (a.array() - b.array()).abs().maxCoeff();
}

#ifndef NDEBUG
#define CAF_ASSERT_FINITE(t)                                                            \
  do {                                                                                  \
    if (!(t).all_finite()) throw std::logic_error(std::string(__func__) + ": non-finite output"); \
  } while (0)
#else
#define CAF_ASSERT_FINITE(t) \
  do {                       \
  } while (0)
#endif

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

}  // namespace caf
