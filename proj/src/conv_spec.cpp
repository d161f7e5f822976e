#include "caf/conv_spec.hpp"

#include <cmath>
#include <sstream>

namespace caf {

std::string to_string(const Shape4& s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Shape4& s) {
  return os << '(' << s.n << ", " << s.c << ", " << s.h << ", " << s.w << ')';
}

Index conv_out_extent(Index in, Index kernel, Index stride, Index pad, Index dilation, const char* axis) {
  if (kernel < 1 || stride < 1 || dilation < 1 || pad < 0) {
    throw ShapeError(std::string("conv: invalid kernel/stride/dilation/padding on axis ") + axis);
  }
  const Index span = in + 2 * pad - dilation * (kernel - 1) - 1;
  if (span < 0) {
    throw ShapeError(std::string("conv: window larger than padded input on axis ") + axis + " (input " +
                     std::to_string(in) + ")");
  }
  return span / stride + 1;
}

template <typename Scalar>
void ConvSpec<Scalar>::validate() const {
  const Index out = out_channels();
  if (geom.groups < 1) throw ShapeError("conv: groups must be positive");
  if (out % geom.groups != 0) {
    throw ShapeError("conv: out_channels " + std::to_string(out) + " not divisible by groups " +
                     std::to_string(geom.groups));
  }
  if (geom.stride.y < 1 || geom.stride.x < 1 || geom.dilation.y < 1 || geom.dilation.x < 1) {
    throw ShapeError("conv: stride and dilation must be >= 1");
  }
  if (bias && bias->shape() != Shape4{1, out, 1, 1}) {
    throw ShapeError("conv: bias shape " + to_string(bias->shape()) + " does not match out_channels " +
                     std::to_string(out));
  }
}

template <typename Scalar>
void Conv3Spec<Scalar>::validate() const {
  if (weight.c() % kDepth != 0 || weight.h() != kDepth || weight.w() != kDepth) {
    throw ShapeError("conv3: weight must be (out, in/groups * 3, 3, 3), got " + to_string(weight.shape()));
  }
  if (groups < 1 || out_channels() % groups != 0) throw ShapeError("conv3: out_channels not divisible by groups");
  if (bias && bias->shape() != Shape4{1, out_channels(), 1, 1}) throw ShapeError("conv3: bias shape mismatch");
}

template <typename Scalar>
ConvSpec<Scalar> make_conv(Index in, Index out, Index kh, Index kw, const ConvGeometry& geom, std::mt19937_64& rng,
                           double gain) {
  if (geom.groups < 1 || in % geom.groups != 0 || out % geom.groups != 0) {
    throw ShapeError("make_conv: channels " + std::to_string(in) + "->" + std::to_string(out) +
                     " not divisible by groups " + std::to_string(geom.groups));
  }
  const Index fan_in = (in / geom.groups) * kh * kw;
  const auto bound = static_cast<Scalar>(gain * std::sqrt(3.0 / static_cast<double>(fan_in)));
  ConvSpec<Scalar> spec{Tensor4<Scalar>::uniform({out, in / geom.groups, kh, kw}, -bound, bound, rng),
                        Tensor4<Scalar>::zeros({1, out, 1, 1}), geom};
  spec.validate();
  return spec;
}

template <typename Scalar>
Conv3Spec<Scalar> make_conv3(Index in, Index out, Index groups, std::mt19937_64& rng, double gain) {
  if (groups < 1 || in % groups != 0 || out % groups != 0) {
    throw ShapeError("make_conv3: channels not divisible by groups");
  }
  const Index fan_in = (in / groups) * 27;
  const auto bound = static_cast<Scalar>(gain * std::sqrt(3.0 / static_cast<double>(fan_in)));
  Conv3Spec<Scalar> spec;
  spec.weight = Tensor4<Scalar>::uniform({out, (in / groups) * 3, 3, 3}, -bound, bound, rng);
  spec.bias = Tensor4<Scalar>::zeros({1, out, 1, 1});
  spec.groups = groups;
  spec.validate();
  return spec;
}

template <typename Scalar>
ConvSpec<Scalar> identity_pointwise(Index channels) {
  ConvSpec<Scalar> spec{Tensor4<Scalar>::zeros({channels, channels, 1, 1}), Tensor4<Scalar>::zeros({1, channels, 1, 1}),
                        {}};
  for (Index i = 0; i < channels; ++i) spec.weight(i, i, 0, 0) = Scalar(1);
  return spec;
}

#define CAF_INSTANTIATE(S)                                                                                        \
  template struct ConvSpec<S>;                                                                                    \
  template struct Conv3Spec<S>;                                                                                   \
  template ConvSpec<S> make_conv<S>(Index, Index, Index, Index, const ConvGeometry&, std::mt19937_64&, double); \
  template Conv3Spec<S> make_conv3<S>(Index, Index, Index, std::mt19937_64&, double);                           \
  template ConvSpec<S> identity_pointwise<S>(Index);

CAF_INSTANTIATE(float)
CAF_INSTANTIATE(double)
#undef CAF_INSTANTIATE

}  // namespace caf
