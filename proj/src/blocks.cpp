#include "caf/blocks.hpp"

#include <cmath>

namespace caf {

Index default_shuffle_groups(Index channels) {
  if (channels < 1) throw ShapeError("default_shuffle_groups: channels must be positive");
  for (Index g = 4; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

template <typename S>
LayerNormParams<S> init_layer_norm(Index channels) {
  return {Tensor4<S>::constant({1, channels, 1, 1}, S(1)), Tensor4<S>::zeros({1, channels, 1, 1}), S(1e-5)};
}

template <typename S>
AcfmParams<S> init_acfm(Index width, Index shuffle_groups, std::mt19937_64& rng) {
  if (shuffle_groups < 1 || width % shuffle_groups != 0) {
    throw ShapeError("init_acfm: width " + std::to_string(width) + " not divisible by shuffle groups " +
                     std::to_string(shuffle_groups));
  }
  AcfmParams<S> p;
  p.qkv_point = make_conv<S>(width, 3 * width, 1, 1, {}, rng, 1.0);
  p.qkv_depth = make_conv<S>(3 * width, 3 * width, 3, 3, {{1, 1}, {1, 1}, {1, 1}, 3 * width}, rng, 1.0);
  p.log_alpha = Tensor4<S>::constant({1, 1, 1, 1}, static_cast<S>(0.5 * std::log(static_cast<double>(width))));
  p.out_point = make_conv<S>(width, width, 1, 1, {}, rng, 1.0);
  p.local_point = make_conv<S>(width, width, 1, 1, {}, rng, 1.0);
  p.shuffle_groups = shuffle_groups;
  p.local_conv3 = make_conv3<S>(width, width, 1, rng, 1.0);
  return p;
}

template <typename S>
MsnnParams<S> init_msnn(Index width, Index hidden, Index n1, Index n2, std::mt19937_64& rng) {
  if (hidden < width) throw ShapeError("init_msnn: hidden width must be >= block width");
  MsnnParams<S> p;
  p.in_point_low = make_conv<S>(width, hidden, 1, 1, {}, rng, 1.0);
  p.depth3_low = make_conv3<S>(hidden, hidden, hidden, rng);
  p.in_point_up = make_conv<S>(width, hidden, 1, 1, {}, rng, 1.0);
  p.dil_n1 = make_conv<S>(hidden, hidden, 3, 3, {{1, 1}, {n1, n1}, {n1, n1}, 1}, rng, 1.0);
  p.dil_n2 = make_conv<S>(hidden, hidden, 3, 3, {{1, 1}, {n2, n2}, {n2, n2}, 1}, rng, 1.0);
  p.out_point = make_conv<S>(hidden, width, 1, 1, {}, rng, 1.0);
  return p;
}

template <typename S>
CafBlockParams<S> init_caf_block(const CafBlockConfig& cfg, std::mt19937_64& rng) {
  CafBlockParams<S> p;
  p.ln1 = init_layer_norm<S>(cfg.width);
  p.acfm = init_acfm<S>(cfg.width, cfg.resolved_groups(), rng);
  p.ln2 = init_layer_norm<S>(cfg.width);
  p.msnn = init_msnn<S>(cfg.width, cfg.resolved_hidden(), cfg.dilation_n1, cfg.dilation_n2, rng);
  return p;
}

namespace {

void require_width(const Shape4& s, Index width, const char* op) {
  if (s.c != width) {
    throw ShapeError(std::string(op) + ": input channel dim c=" + std::to_string(s.c) + " but block width is " +
                     std::to_string(width));
  }
}

template <typename S, typename Fn>
Tensor4<S> run_untaped(const Tensor4<S>& x, Fn&& fn) {
  Tape<S> tape;
  return fn(tape.leaf(x)).value();
}

}  // namespace

template <typename S>
Var<S> layer_norm(Var<S> x, const LayerNormParams<S>& p) {
  Tape<S>& t = *x.tape;
  return layer_norm_channels(x, t.param(p.gamma), t.param(p.beta), p.eps);
}

namespace {

template <typename S>
struct ChannelAttention {
  Var<S> qkv;   // (n, 3c, h, w)
  Var<S> map;   // (n, 1, c, c)
};

template <typename S>
ChannelAttention<S> channel_attention(Var<S> y, const AcfmParams<S>& p) {
  const Shape4 s = y.shape();
  const Index c = p.width();
  require_width(s, c, "acfm_global");
  Tape<S>& t = *y.tape;
  Var<S> qkv = conv2d(conv2d(y, p.qkv_point), p.qkv_depth);
  const Shape4 mat{s.n, 1, c, s.h * s.w};
  Var<S> q = reshape(slice_channels(qkv, 0, c), mat);
  Var<S> k = reshape(slice_channels(qkv, c, c), mat);
  Var<S> inv_alpha = exp(scale(t.param(p.log_alpha), S(-1)));
  return {qkv, softmax_lastdim(scale_by(matmul(q, transpose_last2(k)), inv_alpha))};
}

}  // namespace

template <typename S>
Var<S> channel_attention_map(Var<S> y, const AcfmParams<S>& p) {
  return channel_attention(y, p).map;
}

template <typename S>
Var<S> acfm_global(Var<S> y, const AcfmParams<S>& p) {
  const Shape4 s = y.shape();
  const Index c = p.width();
  auto [qkv, attn] = channel_attention(y, p);
  Var<S> v = reshape(slice_channels(qkv, 2 * c, c), Shape4{s.n, 1, c, s.h * s.w});
  Var<S> mixed = reshape(matmul(attn, v), s);
  return conv2d(mixed, p.out_point) + y;
}

template <typename S>
Var<S> acfm_local(Var<S> y, const AcfmParams<S>& p) {
  require_width(y.shape(), p.width(), "acfm_local");
  return conv3d_singleton(channel_shuffle(conv2d(y, p.local_point), p.shuffle_groups), p.local_conv3);
}

template <typename S>
Var<S> acfm_forward(Var<S> y, const AcfmParams<S>& p) {
  return acfm_global(y, p) + acfm_local(y, p);
}

template <typename S>
Var<S> msnn_forward(Var<S> x, const MsnnParams<S>& p) {
  require_width(x.shape(), p.width(), "msnn_forward");
  Var<S> lower = relu(conv3d_singleton(conv2d(x, p.in_point_low), p.depth3_low));
  Var<S> shared = conv2d(x, p.in_point_up);
  Var<S> upper = conv2d(shared, p.dil_n1) + conv2d(shared, p.dil_n2);
  return conv2d(lower * upper, p.out_point);
}

template <typename S>
Var<S> caf_block_forward(Var<S> x, const CafBlockParams<S>& p) {
  require_width(x.shape(), p.width(), "caf_block_forward");
  Var<S> y = x + acfm_forward(layer_norm(x, p.ln1), p.acfm);
  return y + msnn_forward(layer_norm(y, p.ln2), p.msnn);
}

template <typename S>
Tensor4<S> channel_attention_map(const Tensor4<S>& y, const AcfmParams<S>& p) {
  return run_untaped(y, [&](Var<S> v) { return channel_attention_map(v, p); });
}
template <typename S>
Tensor4<S> acfm_global(const Tensor4<S>& y, const AcfmParams<S>& p) {
  return run_untaped(y, [&](Var<S> v) { return acfm_global(v, p); });
}
template <typename S>
Tensor4<S> acfm_local(const Tensor4<S>& y, const AcfmParams<S>& p) {
  return run_untaped(y, [&](Var<S> v) { return acfm_local(v, p); });
}
template <typename S>
Tensor4<S> acfm_forward(const Tensor4<S>& y, const AcfmParams<S>& p) {
  return run_untaped(y, [&](Var<S> v) { return acfm_forward(v, p); });
}
template <typename S>
Tensor4<S> msnn_forward(const Tensor4<S>& x, const MsnnParams<S>& p) {
  return run_untaped(x, [&](Var<S> v) { return msnn_forward(v, p); });
}
template <typename S>
Tensor4<S> caf_block_forward(const Tensor4<S>& x, const CafBlockParams<S>& p) {
  return run_untaped(x, [&](Var<S> v) { return caf_block_forward(v, p); });
}

#define CAF_INSTANTIATE(S)                                                                   \
  template LayerNormParams<S> init_layer_norm<S>(Index);                                     \
  template AcfmParams<S> init_acfm<S>(Index, Index, std::mt19937_64&);                       \
  template MsnnParams<S> init_msnn<S>(Index, Index, Index, Index, std::mt19937_64&);         \
  template CafBlockParams<S> init_caf_block<S>(const CafBlockConfig&, std::mt19937_64&);     \
  template Var<S> layer_norm<S>(Var<S>, const LayerNormParams<S>&);                          \
  template Var<S> channel_attention_map<S>(Var<S>, const AcfmParams<S>&);                    \
  template Var<S> acfm_global<S>(Var<S>, const AcfmParams<S>&);                              \
  template Var<S> acfm_local<S>(Var<S>, const AcfmParams<S>&);                               \
  template Var<S> acfm_forward<S>(Var<S>, const AcfmParams<S>&);                             \
  template Var<S> msnn_forward<S>(Var<S>, const MsnnParams<S>&);                             \
  template Var<S> caf_block_forward<S>(Var<S>, const CafBlockParams<S>&);                    \
  template Tensor4<S> channel_attention_map<S>(const Tensor4<S>&, const AcfmParams<S>&);     \
  template Tensor4<S> acfm_global<S>(const Tensor4<S>&, const AcfmParams<S>&);               \
  template Tensor4<S> acfm_local<S>(const Tensor4<S>&, const AcfmParams<S>&);                \
  template Tensor4<S> acfm_forward<S>(const Tensor4<S>&, const AcfmParams<S>&);              \
  template Tensor4<S> msnn_forward<S>(const Tensor4<S>&, const MsnnParams<S>&);              \
  template Tensor4<S> caf_block_forward<S>(const Tensor4<S>&, const CafBlockParams<S>&);

CAF_INSTANTIATE(float)
CAF_INSTANTIATE(double)
#undef CAF_INSTANTIATE

}  // namespace caf
