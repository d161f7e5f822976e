#pragma once

#include "caf/tensor.hpp"

#include <optional>

namespace caf {

struct Extent2 {
  Index y = 1;
  Index x = 1;
  friend constexpr bool operator==(const Extent2&, const Extent2&) = default;
};

/// Stride / zero padding / dilation / groups of a 2D cross-correlation.
struct ConvGeometry {
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  Extent2 dilation{1, 1};
  Index groups = 1;
};

/// Output length along one axis; throws if the window does not fit.
Index conv_out_extent(Index in, Index kernel, Index stride, Index pad, Index dilation, const char* axis);

/// A 2D convolution: weights (out, in/groups, kh, kw), optional bias (1, out, 1, 1).
template <typename Scalar>
struct ConvSpec {
  Tensor4<Scalar> weight;
  std::optional<Tensor4<Scalar>> bias;
  ConvGeometry geom;

  Index out_channels() const { return weight.n(); }
  Index in_channels() const { return weight.c() * geom.groups; }
  Index kernel_h() const { return weight.h(); }
  Index kernel_w() const { return weight.w(); }

  /// Throws ShapeError if the hyperparameters are inconsistent.
  void validate() const;
};

/// A 3x3x3 convolution applied to a singleton depth axis.
///
/// Weights are logically (out, in/groups, 3, 3, 3). They are held in a Tensor4 of
/// shape (out, in/groups * 3, 3, 3) with the depth tap folded into dim 1, which is
/// the same row-major memory layout.
template <typename Scalar>
struct Conv3Spec {
  static constexpr Index kDepth = 3;

  Tensor4<Scalar> weight;
  std::optional<Tensor4<Scalar>> bias;
  Index pad_d = 1;
  Extent2 padding{1, 1};
  Index groups = 1;

  Index out_channels() const { return weight.n(); }
  Index in_per_group() const { return weight.c() / kDepth; }
  Index in_channels() const { return in_per_group() * groups; }

  void validate() const;
};

/// Uniform fan-in initialisation, bound = gain * sqrt(3 / fan_in); zero bias.
template <typename Scalar>
ConvSpec<Scalar> make_conv(Index in, Index out, Index kh, Index kw, const ConvGeometry& geom, std::mt19937_64& rng,
                           double gain = 1.4142135623730951);

template <typename Scalar>
Conv3Spec<Scalar> make_conv3(Index in, Index out, Index groups, std::mt19937_64& rng,
                             double gain = 1.4142135623730951);

/// 1x1 conv whose weight is the channel identity and whose bias is zero.
template <typename Scalar>
ConvSpec<Scalar> identity_pointwise(Index channels);

}  // namespace caf
