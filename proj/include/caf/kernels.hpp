#pragma once

// Forward and backward kernels. Every function here is pure: outputs depend only on
// the arguments and nothing is mutated in place.

#include "caf/conv_spec.hpp"
#include "caf/tensor.hpp"

#include <vector>

namespace caf {

template <typename Scalar>
struct ConvGrads {
  Tensor4<Scalar> input;
  Tensor4<Scalar> weight;
  std::optional<Tensor4<Scalar>> bias;
};

/// Cross-correlation (no kernel flip) with zero padding. `bias` may be null.
template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& x, const Tensor4<Scalar>& weight, const Tensor4<Scalar>* bias,
                       const ConvGeometry& geom);

template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& x, const ConvSpec<Scalar>& spec) {
  return conv2d(x, spec.weight, spec.bias ? &*spec.bias : nullptr, spec.geom);
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& weight, bool has_bias,
                                  const ConvGeometry& geom, const Tensor4<Scalar>& grad_out);

/// Geometry of the singleton-depth 3x3x3 convolution.
struct Conv3Geometry {
  Index pad_d = 1;
  Extent2 padding{1, 1};
  Index groups = 1;
};

/// x is read as (n, c, depth=1, h, w). Depth taps that land on the zero padding
/// contribute nothing, so with pad_d = 1 only the centre depth slice is active.
template <typename Scalar>
Tensor4<Scalar> conv3d_singleton(const Tensor4<Scalar>& x, const Tensor4<Scalar>& weight,
                                 const Tensor4<Scalar>* bias, const Conv3Geometry& geom);

template <typename Scalar>
Tensor4<Scalar> conv3d_singleton(const Tensor4<Scalar>& x, const Conv3Spec<Scalar>& spec) {
  return conv3d_singleton(x, spec.weight, spec.bias ? &*spec.bias : nullptr,
                          Conv3Geometry{spec.pad_d, spec.padding, spec.groups});
}

template <typename Scalar>
ConvGrads<Scalar> conv3d_singleton_backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& weight, bool has_bias,
                                            const Conv3Geometry& geom, const Tensor4<Scalar>& grad_out);

/// perm[i] is the source channel of output channel i (reshape (g, c/g), transpose, flatten).
std::vector<Index> shuffle_permutation(Index channels, Index groups);

/// out channel i = in channel perm[i].
template <typename Scalar>
Tensor4<Scalar> permute_channels(const Tensor4<Scalar>& x, const std::vector<Index>& perm);

/// out channel perm[i] = in channel i.
template <typename Scalar>
Tensor4<Scalar> unpermute_channels(const Tensor4<Scalar>& x, const std::vector<Index>& perm);

template <typename Scalar>
Tensor4<Scalar> channel_shuffle(const Tensor4<Scalar>& x, Index groups);

/// Softmax over the last (w) axis; rows are (n, c, h). Uses max subtraction.
template <typename Scalar>
Tensor4<Scalar> softmax_lastdim(const Tensor4<Scalar>& x);

/// Given y = softmax(x) and dL/dy, returns dL/dx = y * (dy - <dy, y>) row-wise.
template <typename Scalar>
Tensor4<Scalar> softmax_lastdim_backward(const Tensor4<Scalar>& y, const Tensor4<Scalar>& grad_out);

/// Normalises each (n, h, w) channel vector; gamma/beta have shape (1, c, 1, 1).
template <typename Scalar>
Tensor4<Scalar> layer_norm_channels(const Tensor4<Scalar>& x, const Tensor4<Scalar>& gamma,
                                    const Tensor4<Scalar>& beta, Scalar eps);

template <typename Scalar>
struct LayerNormGrads {
  Tensor4<Scalar> input;
  Tensor4<Scalar> gamma;
  Tensor4<Scalar> beta;
};

template <typename Scalar>
LayerNormGrads<Scalar> layer_norm_channels_backward(const Tensor4<Scalar>& x, const Tensor4<Scalar>& gamma,
                                                    Scalar eps, const Tensor4<Scalar>& grad_out);

template <typename Scalar>
Tensor4<Scalar> relu(const Tensor4<Scalar>& x) {
  return Tensor4<Scalar>(x.shape(), x.array().max(Scalar(0)));
}

template <typename Scalar>
Tensor4<Scalar> add(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return Tensor4<Scalar>(a.shape(), a.array() + b.array());
}

template <typename Scalar>
Tensor4<Scalar> mul(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return Tensor4<Scalar>(a.shape(), a.array() * b.array());
}

/// Batched matrix product over (n, c): (n, c, r, k) x (n, c, k, m) -> (n, c, r, m).
template <typename Scalar>
Tensor4<Scalar> matmul(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b);

/// Swap the h and w axes of every (n, c) matrix.
template <typename Scalar>
Tensor4<Scalar> transpose_last2(const Tensor4<Scalar>& x);

/// Channels [begin, begin + count).
template <typename Scalar>
Tensor4<Scalar> slice_channels(const Tensor4<Scalar>& x, Index begin, Index count);

}  // namespace caf
