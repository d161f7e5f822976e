#pragma once

// Attention and convolution fusion module (ACFM), multi-scale gated feed-forward
// network (MSNN) and the pre-norm residual CAFBlock that composes them.

#include "caf/autodiff.hpp"
#include "caf/conv_spec.hpp"
#include "caf/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace caf {

/// 4 when it divides c, otherwise the largest divisor of c that is <= 4.
Index default_shuffle_groups(Index channels);

struct CafBlockConfig {
  Index width = 32;
  Index hidden = 0;          // 0 selects 2 * width
  Index shuffle_groups = 0;  // 0 selects default_shuffle_groups(width)
  Index dilation_n1 = 2;
  Index dilation_n2 = 3;

  Index resolved_hidden() const { return hidden > 0 ? hidden : 2 * width; }
  Index resolved_groups() const { return shuffle_groups > 0 ? shuffle_groups : default_shuffle_groups(width); }
};

template <typename Scalar>
struct LayerNormParams {
  Tensor4<Scalar> gamma;  // (1, c, 1, 1)
  Tensor4<Scalar> beta;
  Scalar eps = Scalar(1e-5);
};

template <typename Scalar>
struct AcfmParams {
  ConvSpec<Scalar> qkv_point;  // 1x1, c -> 3c
  ConvSpec<Scalar> qkv_depth;  // 3x3 depthwise over 3c
  Tensor4<Scalar> log_alpha;   // temperature alpha = exp(log_alpha) > 0
  ConvSpec<Scalar> out_point;  // 1x1, c -> c
  ConvSpec<Scalar> local_point;
  Index shuffle_groups = 1;
  Conv3Spec<Scalar> local_conv3;  // 3x3x3, c -> c

  Index width() const { return out_point.out_channels(); }
  Scalar alpha() const { return std::exp(log_alpha[0]); }
};

template <typename Scalar>
struct MsnnParams {
  ConvSpec<Scalar> in_point_low;   // 1x1, c -> hidden
  Conv3Spec<Scalar> depth3_low;    // 3x3x3 depthwise over hidden
  ConvSpec<Scalar> in_point_up;    // 1x1, c -> hidden, shared by both dilated convs
  ConvSpec<Scalar> dil_n1;         // 3x3, dilation N1
  ConvSpec<Scalar> dil_n2;         // 3x3, dilation N2
  ConvSpec<Scalar> out_point;      // 1x1, hidden -> c

  Index width() const { return out_point.out_channels(); }
  Index hidden() const { return out_point.in_channels(); }
};

template <typename Scalar>
struct CafBlockParams {
  LayerNormParams<Scalar> ln1;
  AcfmParams<Scalar> acfm;
  LayerNormParams<Scalar> ln2;
  MsnnParams<Scalar> msnn;

  Index width() const { return acfm.width(); }
};

template <typename Scalar>
LayerNormParams<Scalar> init_layer_norm(Index channels);
template <typename Scalar>
AcfmParams<Scalar> init_acfm(Index width, Index shuffle_groups, std::mt19937_64& rng);
template <typename Scalar>
MsnnParams<Scalar> init_msnn(Index width, Index hidden, Index n1, Index n2, std::mt19937_64& rng);
template <typename Scalar>
CafBlockParams<Scalar> init_caf_block(const CafBlockConfig& cfg, std::mt19937_64& rng);

// Taped forward passes.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, const LayerNormParams<Scalar>& p);
/// Softmax((Q K^T) / alpha) over channel-major Q, K: shape (n, 1, c, c).
template <typename Scalar>
Var<Scalar> channel_attention_map(Var<Scalar> y, const AcfmParams<Scalar>& p);
template <typename Scalar>
Var<Scalar> acfm_global(Var<Scalar> y, const AcfmParams<Scalar>& p);
template <typename Scalar>
Var<Scalar> acfm_local(Var<Scalar> y, const AcfmParams<Scalar>& p);
template <typename Scalar>
Var<Scalar> acfm_forward(Var<Scalar> y, const AcfmParams<Scalar>& p);
template <typename Scalar>
Var<Scalar> msnn_forward(Var<Scalar> x, const MsnnParams<Scalar>& p);
template <typename Scalar>
Var<Scalar> caf_block_forward(Var<Scalar> x, const CafBlockParams<Scalar>& p);

// Untaped convenience wrappers.
template <typename Scalar>
Tensor4<Scalar> channel_attention_map(const Tensor4<Scalar>& y, const AcfmParams<Scalar>& p);
template <typename Scalar>
Tensor4<Scalar> acfm_global(const Tensor4<Scalar>& y, const AcfmParams<Scalar>& p);
template <typename Scalar>
Tensor4<Scalar> acfm_local(const Tensor4<Scalar>& y, const AcfmParams<Scalar>& p);
template <typename Scalar>
Tensor4<Scalar> acfm_forward(const Tensor4<Scalar>& y, const AcfmParams<Scalar>& p);
template <typename Scalar>
Tensor4<Scalar> msnn_forward(const Tensor4<Scalar>& x, const MsnnParams<Scalar>& p);
template <typename Scalar>
Tensor4<Scalar> caf_block_forward(const Tensor4<Scalar>& x, const CafBlockParams<Scalar>& p);

// Parameter enumeration. The visitor is called as f(name, tensor, logical_dims) in a
// fixed order; that order defines checkpoint layout and parameter counting.

using Dims = std::vector<std::uint64_t>;

namespace detail {
inline Dims dims_of(const Shape4& s) {
  return {static_cast<std::uint64_t>(s.n), static_cast<std::uint64_t>(s.c), static_cast<std::uint64_t>(s.h),
          static_cast<std::uint64_t>(s.w)};
}
}  // namespace detail

template <typename Spec, typename F>
  requires requires(Spec& s) { s.geom; }
void for_each_param(Spec& spec, const std::string& prefix, F&& f) {
  f(prefix + ".weight", spec.weight, detail::dims_of(spec.weight.shape()));
  if (spec.bias) f(prefix + ".bias", *spec.bias, Dims{static_cast<std::uint64_t>(spec.bias->c())});
}

template <typename Spec, typename F>
  requires requires(Spec& s) { s.pad_d; }
void for_each_param(Spec& spec, const std::string& prefix, F&& f) {
  const auto out = static_cast<std::uint64_t>(spec.weight.n());
  const auto in = static_cast<std::uint64_t>(spec.weight.c() / 3);
  f(prefix + ".weight", spec.weight, Dims{out, in, 3, 3, 3});
  if (spec.bias) f(prefix + ".bias", *spec.bias, Dims{static_cast<std::uint64_t>(spec.bias->c())});
}

template <typename P, typename F>
  requires requires(P& p) { p.gamma; p.beta; }
void for_each_param(P& p, const std::string& prefix, F&& f) {
  const Dims d{static_cast<std::uint64_t>(p.gamma.c())};
  f(prefix + ".gamma", p.gamma, d);
  f(prefix + ".beta", p.beta, d);
}

template <typename P, typename F>
  requires requires(P& p) { p.qkv_point; p.local_conv3; }
void for_each_param(P& p, const std::string& prefix, F&& f) {
  for_each_param(p.qkv_point, prefix + ".qkv_point", f);
  for_each_param(p.qkv_depth, prefix + ".qkv_depth", f);
  f(prefix + ".log_alpha", p.log_alpha, Dims{1});
  for_each_param(p.out_point, prefix + ".out_point", f);
  for_each_param(p.local_point, prefix + ".local_point", f);
  for_each_param(p.local_conv3, prefix + ".local_conv3", f);
}

template <typename P, typename F>
  requires requires(P& p) { p.depth3_low; p.dil_n1; }
void for_each_param(P& p, const std::string& prefix, F&& f) {
  for_each_param(p.in_point_low, prefix + ".in_point_low", f);
  for_each_param(p.depth3_low, prefix + ".depth3_low", f);
  for_each_param(p.in_point_up, prefix + ".in_point_up", f);
  for_each_param(p.dil_n1, prefix + ".dil_n1", f);
  for_each_param(p.dil_n2, prefix + ".dil_n2", f);
  for_each_param(p.out_point, prefix + ".out_point", f);
}

template <typename P, typename F>
  requires requires(P& p) { p.ln1; p.acfm; p.msnn; }
void for_each_param(P& p, const std::string& prefix, F&& f) {
  for_each_param(p.ln1, prefix + ".ln1", f);
  for_each_param(p.acfm, prefix + ".acfm", f);
  for_each_param(p.ln2, prefix + ".ln2", f);
  for_each_param(p.msnn, prefix + ".msnn", f);
}

/// Number of learnable scalars.
template <typename P>
std::size_t param_count(const P& p) {
  std::size_t total = 0;
  for_each_param(p, "p", [&](const std::string&, const auto& t, const Dims&) { total += static_cast<std::size_t>(t.size()); });
  return total;
}

}  // namespace caf
