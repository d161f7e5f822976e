#include "caf/autodiff.hpp"

namespace caf {
namespace {

template <typename S>
Tape<S>& same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw std::logic_error("autodiff: operands recorded on different tapes");
  return *a.tape;
}

}  // namespace

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> weight, std::optional<Var<S>> bias, const ConvGeometry& geom) {
  Tape<S>& t = same_tape(x, weight);
  std::vector<Index> inputs{x.id, weight.id};
  if (bias) {
    same_tape(x, *bias);
    inputs.push_back(bias->id);
  }
  Tensor4<S> out = conv2d(x.value(), weight.value(), bias ? &bias->value() : nullptr, geom);
  const bool has_bias = bias.has_value();
  return t.record("conv2d", std::move(out), inputs,
                  [&t, xi = x.id, wi = weight.id, bi = bias ? bias->id : -1, has_bias, geom](
                      const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    ConvGrads<S> grads = conv2d_backward(t.value(xi), t.value(wi), has_bias, geom, g);
                    sink.add(xi, std::move(grads.input));
                    sink.add(wi, std::move(grads.weight));
                    if (has_bias) sink.add(bi, std::move(*grads.bias));
                  });
}

template <typename S>
Var<S> conv2d(Var<S> x, const ConvSpec<S>& spec) {
  Tape<S>& t = *x.tape;
  std::optional<Var<S>> bias;
  if (spec.bias) bias = t.param(*spec.bias);
  return conv2d(x, t.param(spec.weight), bias, spec.geom);
}

template <typename S>
Var<S> conv3d_singleton(Var<S> x, Var<S> weight, std::optional<Var<S>> bias, const Conv3Geometry& geom) {
  Tape<S>& t = same_tape(x, weight);
  std::vector<Index> inputs{x.id, weight.id};
  if (bias) inputs.push_back(bias->id);
  Tensor4<S> out = conv3d_singleton(x.value(), weight.value(), bias ? &bias->value() : nullptr, geom);
  const bool has_bias = bias.has_value();
  return t.record("conv3d_singleton", std::move(out), inputs,
                  [&t, xi = x.id, wi = weight.id, bi = bias ? bias->id : -1, has_bias, geom](
                      const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    ConvGrads<S> grads = conv3d_singleton_backward(t.value(xi), t.value(wi), has_bias, geom, g);
                    sink.add(xi, std::move(grads.input));
                    sink.add(wi, std::move(grads.weight));
                    if (has_bias) sink.add(bi, std::move(*grads.bias));
                  });
}

template <typename S>
Var<S> conv3d_singleton(Var<S> x, const Conv3Spec<S>& spec) {
  Tape<S>& t = *x.tape;
  std::optional<Var<S>> bias;
  if (spec.bias) bias = t.param(*spec.bias);
  return conv3d_singleton(x, t.param(spec.weight), bias, Conv3Geometry{spec.pad_d, spec.padding, spec.groups});
}

template <typename S>
Var<S> channel_shuffle(Var<S> x, Index groups) {
  std::vector<Index> perm = shuffle_permutation(x.shape().c, groups);
  Tensor4<S> out = permute_channels(x.value(), perm);
  return x.tape->record("channel_shuffle", std::move(out), {x.id},
                        [xi = x.id, perm = std::move(perm)](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                          sink.add(xi, unpermute_channels(g, perm));
                        });
}

template <typename S>
Var<S> softmax_lastdim(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto yi = static_cast<Index>(t.size());  // id this node is about to receive
  return t.record("softmax_lastdim", softmax_lastdim(x.value()), {x.id},
                  [&t, xi = x.id, yi](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    sink.add(xi, softmax_lastdim_backward(t.value(yi), g));
                  });
}

template <typename S>
Var<S> layer_norm_channels(Var<S> x, Var<S> gamma, Var<S> beta, S eps) {
  Tape<S>& t = same_tape(x, gamma);
  same_tape(x, beta);
  return t.record("layer_norm_channels", layer_norm_channels(x.value(), gamma.value(), beta.value(), eps),
                  {x.id, gamma.id, beta.id},
                  [&t, xi = x.id, gi = gamma.id, bi = beta.id, eps](const Tensor4<S>& g,
                                                                    typename Tape<S>::Sink& sink) {
                    LayerNormGrads<S> grads = layer_norm_channels_backward(t.value(xi), t.value(gi), eps, g);
                    sink.add(xi, std::move(grads.input));
                    sink.add(gi, std::move(grads.gamma));
                    sink.add(bi, std::move(grads.beta));
                  });
}

template <typename S>
Var<S> relu(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = x.value();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(xv.size()));
  for (Index i = 0; i < xv.size(); ++i) mask[static_cast<std::size_t>(i)] = xv[i] > S(0) ? 1 : 0;
  t.note_branches(mask);
  return t.record("relu", relu(xv), {x.id}, [&t, xi = x.id](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
    // Subgradient at exactly 0 is 0.
    const auto& xv = t.value(xi);
    sink.add(xi, Tensor4<S>(g.shape(), (xv.array() > S(0)).select(g.array(), S(0))));
  });
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  Tape<S>& t = same_tape(a, b);
  return t.record("add", add(a.value(), b.value()), {a.id, b.id},
                  [ai = a.id, bi = b.id](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    sink.add(ai, g);
                    sink.add(bi, g);
                  });
}

template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) {
  Tape<S>& t = same_tape(a, b);
  return t.record("mul", mul(a.value(), b.value()), {a.id, b.id},
                  [&t, ai = a.id, bi = b.id](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    sink.add(ai, mul(g, t.value(bi)));
                    sink.add(bi, mul(g, t.value(ai)));
                  });
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = same_tape(a, b);
  return t.record("matmul", matmul(a.value(), b.value()), {a.id, b.id},
                  [&t, ai = a.id, bi = b.id](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    sink.add(ai, matmul(g, transpose_last2(t.value(bi))));
                    sink.add(bi, matmul(transpose_last2(t.value(ai)), g));
                  });
}

template <typename S>
Var<S> transpose_last2(Var<S> x) {
  return x.tape->record("transpose_last2", transpose_last2(x.value()), {x.id},
                        [xi = x.id](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                          sink.add(xi, transpose_last2(g));
                        });
}

template <typename S>
Var<S> reshape(Var<S> x, const Shape4& shape) {
  return x.tape->record("reshape", x.value().reshaped(shape), {x.id},
                        [xi = x.id, from = x.shape()](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                          sink.add(xi, g.reshaped(from));
                        });
}

template <typename S>
Var<S> slice_channels(Var<S> x, Index begin, Index count) {
  return x.tape->record("slice_channels", slice_channels(x.value(), begin, count), {x.id},
                        [xi = x.id, from = x.shape(), begin, count](const Tensor4<S>& g,
                                                                     typename Tape<S>::Sink& sink) {
                          Tensor4<S> dx(from);
                          const Index block = count * from.h * from.w;
                          for (Index in = 0; in < from.n; ++in) std::copy_n(g.plane(in, 0), block, dx.plane(in, begin));
                          sink.add(xi, std::move(dx));
                        });
}

template <typename S>
Var<S> scale(Var<S> x, S k) {
  return x.tape->record("scale", Tensor4<S>(x.shape(), x.value().array() * k), {x.id},
                        [xi = x.id, k](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                          sink.add(xi, Tensor4<S>(g.shape(), g.array() * k));
                        });
}

template <typename S>
Var<S> scale_by(Var<S> x, Var<S> s) {
  Tape<S>& t = same_tape(x, s);
  if (s.value().size() != 1) throw ShapeError("scale_by: scale must hold one element, got " + to_string(s.shape()));
  const S k = s.value()[0];
  return t.record("scale_by", Tensor4<S>(x.shape(), x.value().array() * k), {x.id, s.id},
                  [&t, xi = x.id, si = s.id](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    const S k = t.value(si)[0];
                    sink.add(xi, Tensor4<S>(g.shape(), g.array() * k));
                    sink.add(si, Tensor4<S>::constant(t.value(si).shape(), (g.array() * t.value(xi).array()).sum()));
                  });
}

template <typename S>
Var<S> exp(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto yi = static_cast<Index>(t.size());
  return t.record("exp", Tensor4<S>(x.shape(), x.value().array().exp()), {x.id},
                  [&t, xi = x.id, yi](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    sink.add(xi, Tensor4<S>(g.shape(), g.array() * t.value(yi).array()));
                  });
}

template <typename S>
Var<S> sum(Var<S> x) {
  return x.tape->record("sum", Tensor4<S>::constant({1, 1, 1, 1}, x.value().array().sum()), {x.id},
                        [xi = x.id, from = x.shape()](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                          sink.add(xi, Tensor4<S>::constant(from, g[0]));
                        });
}

template <typename S>
Var<S> dot(Var<S> x, const Tensor4<S>& weights) {
  if (weights.shape() != x.shape()) throw ShapeError("dot: weight shape mismatch");
  return x.tape->record("dot", Tensor4<S>::constant({1, 1, 1, 1}, (x.value().array() * weights.array()).sum()),
                        {x.id}, [xi = x.id, weights](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                          sink.add(xi, Tensor4<S>(weights.shape(), weights.array() * g[0]));
                        });
}

#define CAF_INSTANTIATE(S)                                                                             \
  template Var<S> conv2d<S>(Var<S>, Var<S>, std::optional<Var<S>>, const ConvGeometry&);               \
  template Var<S> conv2d<S>(Var<S>, const ConvSpec<S>&);                                               \
  template Var<S> conv3d_singleton<S>(Var<S>, Var<S>, std::optional<Var<S>>, const Conv3Geometry&);    \
  template Var<S> conv3d_singleton<S>(Var<S>, const Conv3Spec<S>&);                                    \
  template Var<S> channel_shuffle<S>(Var<S>, Index);                                                   \
  template Var<S> softmax_lastdim<S>(Var<S>);                                                          \
  template Var<S> layer_norm_channels<S>(Var<S>, Var<S>, Var<S>, S);                                   \
  template Var<S> relu<S>(Var<S>);                                                                     \
  template Var<S> operator+ <S>(Var<S>, Var<S>);                                                       \
  template Var<S> operator* <S>(Var<S>, Var<S>);                                                       \
  template Var<S> matmul<S>(Var<S>, Var<S>);                                                           \
  template Var<S> transpose_last2<S>(Var<S>);                                                          \
  template Var<S> reshape<S>(Var<S>, const Shape4&);                                                   \
  template Var<S> slice_channels<S>(Var<S>, Index, Index);                                             \
  template Var<S> scale<S>(Var<S>, S);                                                                 \
  template Var<S> scale_by<S>(Var<S>, Var<S>);                                                         \
  template Var<S> exp<S>(Var<S>);                                                                      \
  template Var<S> sum<S>(Var<S>);                                                                      \
  template Var<S> dot<S>(Var<S>, const Tensor4<S>&);

CAF_INSTANTIATE(float)
CAF_INSTANTIATE(double)
#undef CAF_INSTANTIATE

}  // namespace caf
