#include "caf/kernels.hpp"

#include <algorithm>
#include <numeric>

namespace caf {
namespace {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapRM = Eigen::Map<const MatRM<S>>;

struct ConvDims {
  Index n, c, h, w;   // input
  Index o, cg, og;    // out channels, in/out channels per group
  Index kh, kw;
  Index oh, ow;
  ConvGeometry g;

  Index k() const { return cg * kh * kw; }
  Index p() const { return oh * ow; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && g.stride.y == 1 && g.stride.x == 1 && g.padding.y == 0 && g.padding.x == 0;
  }
};

ConvDims conv_dims(const Shape4& x, const Shape4& w, const ConvGeometry& g) {
  if (g.groups < 1) throw ShapeError("conv2d: groups must be positive");
  if (x.c != w.c * g.groups) {
    throw ShapeError("conv2d: input channel dim c=" + std::to_string(x.c) + " but weight expects " +
                     std::to_string(w.c * g.groups) + " (" + std::to_string(w.c) + " per group x " +
                     std::to_string(g.groups) + " groups)");
  }
  if (w.n % g.groups != 0) {
    throw ShapeError("conv2d: out channel dim " + std::to_string(w.n) + " not divisible by groups " +
                     std::to_string(g.groups));
  }
  ConvDims d{};
  d.n = x.n;
  d.c = x.c;
  d.h = x.h;
  d.w = x.w;
  d.o = w.n;
  d.cg = w.c;
  d.og = w.n / g.groups;
  d.kh = w.h;
  d.kw = w.w;
  d.g = g;
  d.oh = conv_out_extent(x.h, w.h, g.stride.y, g.padding.y, g.dilation.y, "h");
  d.ow = conv_out_extent(x.w, w.w, g.stride.x, g.padding.x, g.dilation.x, "w");
  return d;
}

// Column matrix (cg*kh*kw) x (n*oh*ow) for group `gi`.
template <typename S>
void im2col(const Tensor4<S>& x, const ConvDims& d, Index gi, MatRM<S>& col) {
  const Index np = d.n * d.p();
  col.resize(d.k(), np);
  for (Index ci = 0; ci < d.cg; ++ci) {
    for (Index ky = 0; ky < d.kh; ++ky) {
      for (Index kx = 0; kx < d.kw; ++kx) {
        S* dst = col.data() + ((ci * d.kh + ky) * d.kw + kx) * np;
        for (Index in = 0; in < d.n; ++in) {
          const S* src = x.plane(in, gi * d.cg + ci);
          for (Index oy = 0; oy < d.oh; ++oy) {
            const Index iy = oy * d.g.stride.y - d.g.padding.y + ky * d.g.dilation.y;
            S* row = dst + in * d.p() + oy * d.ow;
            if (iy < 0 || iy >= d.h) {
              std::fill(row, row + d.ow, S(0));
              continue;
            }
            for (Index ox = 0; ox < d.ow; ++ox) {
              const Index ix = ox * d.g.stride.x - d.g.padding.x + kx * d.g.dilation.x;
              row[ox] = (ix >= 0 && ix < d.w) ? src[iy * d.w + ix] : S(0);
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const MatRM<S>& col, const ConvDims& d, Index gi, Tensor4<S>& dx) {
  const Index np = d.n * d.p();
  for (Index ci = 0; ci < d.cg; ++ci) {
    for (Index ky = 0; ky < d.kh; ++ky) {
      for (Index kx = 0; kx < d.kw; ++kx) {
        const S* src = col.data() + ((ci * d.kh + ky) * d.kw + kx) * np;
        for (Index in = 0; in < d.n; ++in) {
          S* dst = dx.plane(in, gi * d.cg + ci);
          for (Index oy = 0; oy < d.oh; ++oy) {
            const Index iy = oy * d.g.stride.y - d.g.padding.y + ky * d.g.dilation.y;
            if (iy < 0 || iy >= d.h) continue;
            const S* row = src + in * d.p() + oy * d.ow;
            for (Index ox = 0; ox < d.ow; ++ox) {
              const Index ix = ox * d.g.stride.x - d.g.padding.x + kx * d.g.dilation.x;
              if (ix >= 0 && ix < d.w) dst[iy * d.w + ix] += row[ox];
            }
          }
        }
      }
    }
  }
}

// One input channel per group (depthwise, possibly with a channel multiplier).
template <typename S>
void depthwise_forward(const Tensor4<S>& x, const Tensor4<S>& weight, const ConvDims& d, Tensor4<S>& out) {
  const Index taps = d.kh * d.kw;
  for (Index in = 0; in < d.n; ++in) {
    for (Index oc = 0; oc < d.o; ++oc) {
      const S* src = x.plane(in, oc / d.og);
      const S* wk = weight.data() + oc * taps;
      S* dst = out.plane(in, oc);
      for (Index oy = 0; oy < d.oh; ++oy) {
        for (Index ox = 0; ox < d.ow; ++ox) {
          S acc = 0;
          for (Index ky = 0; ky < d.kh; ++ky) {
            const Index iy = oy * d.g.stride.y - d.g.padding.y + ky * d.g.dilation.y;
            if (iy < 0 || iy >= d.h) continue;
            for (Index kx = 0; kx < d.kw; ++kx) {
              const Index ix = ox * d.g.stride.x - d.g.padding.x + kx * d.g.dilation.x;
              if (ix < 0 || ix >= d.w) continue;
              acc += wk[ky * d.kw + kx] * src[iy * d.w + ix];
            }
          }
          dst[oy * d.ow + ox] = acc;
        }
      }
    }
  }
}

template <typename S>
void depthwise_backward(const Tensor4<S>& x, const Tensor4<S>& weight, const ConvDims& d, const Tensor4<S>& grad_out,
                        Tensor4<S>& dx, Tensor4<S>& dw) {
  const Index taps = d.kh * d.kw;
  for (Index in = 0; in < d.n; ++in) {
    for (Index oc = 0; oc < d.o; ++oc) {
      const S* src = x.plane(in, oc / d.og);
      S* dsrc = dx.plane(in, oc / d.og);
      const S* wk = weight.data() + oc * taps;
      S* dwk = dw.data() + oc * taps;
      const S* g = grad_out.plane(in, oc);
      for (Index oy = 0; oy < d.oh; ++oy) {
        for (Index ox = 0; ox < d.ow; ++ox) {
          const S go = g[oy * d.ow + ox];
          for (Index ky = 0; ky < d.kh; ++ky) {
            const Index iy = oy * d.g.stride.y - d.g.padding.y + ky * d.g.dilation.y;
            if (iy < 0 || iy >= d.h) continue;
            for (Index kx = 0; kx < d.kw; ++kx) {
              const Index ix = ox * d.g.stride.x - d.g.padding.x + kx * d.g.dilation.x;
              if (ix < 0 || ix >= d.w) continue;
              dwk[ky * d.kw + kx] += go * src[iy * d.w + ix];
              dsrc[iy * d.w + ix] += go * wk[ky * d.kw + kx];
            }
          }
        }
      }
    }
  }
}

template <typename S>
void add_bias(const Tensor4<S>& bias, Tensor4<S>& out) {
  for (Index in = 0; in < out.n(); ++in) {
    for (Index oc = 0; oc < out.c(); ++oc) {
      S* p = out.plane(in, oc);
      const S b = bias[oc];
      for (Index i = 0; i < out.h() * out.w(); ++i) p[i] += b;
    }
  }
}

template <typename S>
Tensor4<S> bias_grad(const Tensor4<S>& grad_out) {
  Tensor4<S> db({1, grad_out.c(), 1, 1});
  const Index plane = grad_out.h() * grad_out.w();
  for (Index in = 0; in < grad_out.n(); ++in) {
    for (Index oc = 0; oc < grad_out.c(); ++oc) {
      db[oc] += Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(grad_out.plane(in, oc), plane).sum();
    }
  }
  return db;
}

void check_bias(const Shape4& bias, Index out) {
  if (bias != Shape4{1, out, 1, 1}) {
    throw ShapeError("conv: bias shape " + to_string(bias) + " does not match out_channels " + std::to_string(out));
  }
}

// Centre-depth weight slice (out, in/groups, 3, 3) for depth tap `kd`.
template <typename S>
Tensor4<S> depth_slice(const Tensor4<S>& w3, Index kd) {
  const Index cg = w3.c() / Conv3Spec<S>::kDepth;
  Tensor4<S> w2({w3.n(), cg, w3.h(), w3.w()});
  const Index plane = w3.h() * w3.w();
  for (Index o = 0; o < w3.n(); ++o) {
    for (Index ci = 0; ci < cg; ++ci) {
      std::copy_n(w3.plane(o, ci * Conv3Spec<S>::kDepth + kd), plane, w2.plane(o, ci));
    }
  }
  return w2;
}

void check_conv3(const Shape4& w3, const Conv3Geometry& g) {
  if (w3.c % 3 != 0 || w3.h != 3 || w3.w != 3) {
    throw ShapeError("conv3d_singleton: weight must be (out, in/groups * 3, 3, 3), got " + to_string(w3));
  }
  // Output depth is 1 + 2 * pad_d - 3 + 1, which must equal the singleton input depth.
  if (g.pad_d != 1) throw ShapeError("conv3d_singleton: depth padding must be 1 to keep depth 1");
}

}  // namespace

template <typename S>
Tensor4<S> conv2d(const Tensor4<S>& x, const Tensor4<S>& weight, const Tensor4<S>* bias, const ConvGeometry& geom) {
  const ConvDims d = conv_dims(x.shape(), weight.shape(), geom);
  if (bias) check_bias(bias->shape(), d.o);
  Tensor4<S> out({d.n, d.o, d.oh, d.ow});

  if (d.cg == 1 && d.g.groups > 1) {
    depthwise_forward(x, weight, d, out);
  } else if (d.pointwise()) {
    for (Index in = 0; in < d.n; ++in) {
      for (Index gi = 0; gi < d.g.groups; ++gi) {
        CMapRM<S> wg(weight.data() + gi * d.og * d.cg, d.og, d.cg);
        CMapRM<S> xg(x.plane(in, gi * d.cg), d.cg, d.p());
        MapRM<S>(out.plane(in, gi * d.og), d.og, d.p()).noalias() = wg * xg;
      }
    }
  } else {
    MatRM<S> col;
    MatRM<S> res;
    for (Index gi = 0; gi < d.g.groups; ++gi) {
      im2col(x, d, gi, col);
      CMapRM<S> wg(weight.data() + gi * d.og * d.k(), d.og, d.k());
      res.noalias() = wg * col;
      for (Index o = 0; o < d.og; ++o) {
        for (Index in = 0; in < d.n; ++in) {
          std::copy_n(res.data() + o * res.cols() + in * d.p(), d.p(), out.plane(in, gi * d.og + o));
        }
      }
    }
  }
  if (bias) add_bias(*bias, out);
  CAF_ASSERT_FINITE(out);
  return out;
}

template <typename S>
ConvGrads<S> conv2d_backward(const Tensor4<S>& x, const Tensor4<S>& weight, bool has_bias, const ConvGeometry& geom,
                             const Tensor4<S>& grad_out) {
  const ConvDims d = conv_dims(x.shape(), weight.shape(), geom);
  if (grad_out.shape() != Shape4{d.n, d.o, d.oh, d.ow}) {
    throw ShapeError("conv2d_backward: grad shape " + to_string(grad_out.shape()) + " does not match output");
  }
  ConvGrads<S> g{Tensor4<S>(x.shape()), Tensor4<S>(weight.shape()), std::nullopt};

  if (d.cg == 1 && d.g.groups > 1) {
    depthwise_backward(x, weight, d, grad_out, g.input, g.weight);
  } else if (d.pointwise()) {
    for (Index in = 0; in < d.n; ++in) {
      for (Index gi = 0; gi < d.g.groups; ++gi) {
        CMapRM<S> wg(weight.data() + gi * d.og * d.cg, d.og, d.cg);
        CMapRM<S> xg(x.plane(in, gi * d.cg), d.cg, d.p());
        CMapRM<S> gy(grad_out.plane(in, gi * d.og), d.og, d.p());
        MapRM<S>(g.weight.data() + gi * d.og * d.cg, d.og, d.cg).noalias() += gy * xg.transpose();
        MapRM<S>(g.input.plane(in, gi * d.cg), d.cg, d.p()).noalias() = wg.transpose() * gy;
      }
    }
  } else {
    MatRM<S> col;
    MatRM<S> gy(d.og, d.n * d.p());
    MatRM<S> dcol;
    for (Index gi = 0; gi < d.g.groups; ++gi) {
      for (Index o = 0; o < d.og; ++o) {
        for (Index in = 0; in < d.n; ++in) {
          std::copy_n(grad_out.plane(in, gi * d.og + o), d.p(), gy.data() + o * gy.cols() + in * d.p());
        }
      }
      im2col(x, d, gi, col);
      CMapRM<S> wg(weight.data() + gi * d.og * d.k(), d.og, d.k());
      MapRM<S>(g.weight.data() + gi * d.og * d.k(), d.og, d.k()).noalias() = gy * col.transpose();
      dcol.noalias() = wg.transpose() * gy;
      col2im_add(dcol, d, gi, g.input);
    }
  }
  if (has_bias) g.bias = bias_grad(grad_out);
  return g;
}

template <typename S>
Tensor4<S> conv3d_singleton(const Tensor4<S>& x, const Tensor4<S>& weight, const Tensor4<S>* bias,
                            const Conv3Geometry& geom) {
  check_conv3(weight.shape(), geom);
  const ConvGeometry g2{{1, 1}, geom.padding, {1, 1}, geom.groups};
  std::optional<Tensor4<S>> out;
  for (Index kd = 0; kd < Conv3Spec<S>::kDepth; ++kd) {
    const Index src_depth = kd - geom.pad_d;  // output depth 0
    if (src_depth != 0) continue;             // lands on zero padding
    Tensor4<S> part = conv2d<S>(x, depth_slice(weight, kd), nullptr, g2);
    out = out ? add(*out, part) : std::move(part);
  }
  if (bias) {
    check_bias(bias->shape(), out->c());
    add_bias(*bias, *out);
  }
  return *std::move(out);
}

template <typename S>
ConvGrads<S> conv3d_singleton_backward(const Tensor4<S>& x, const Tensor4<S>& weight, bool has_bias,
                                       const Conv3Geometry& geom, const Tensor4<S>& grad_out) {
  check_conv3(weight.shape(), geom);
  const ConvGeometry g2{{1, 1}, geom.padding, {1, 1}, geom.groups};
  ConvGrads<S> g{Tensor4<S>(x.shape()), Tensor4<S>(weight.shape()), std::nullopt};
  const Index cg = weight.c() / Conv3Spec<S>::kDepth;
  const Index plane = weight.h() * weight.w();
  for (Index kd = 0; kd < Conv3Spec<S>::kDepth; ++kd) {
    if (kd - geom.pad_d != 0) continue;
    ConvGrads<S> part = conv2d_backward(x, depth_slice(weight, kd), false, g2, grad_out);
    g.input.array() += part.input.array();
    for (Index o = 0; o < weight.n(); ++o) {
      for (Index ci = 0; ci < cg; ++ci) {
        std::copy_n(part.weight.plane(o, ci), plane, g.weight.plane(o, ci * Conv3Spec<S>::kDepth + kd));
      }
    }
  }
  if (has_bias) g.bias = bias_grad(grad_out);
  return g;
}

std::vector<Index> shuffle_permutation(Index channels, Index groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ShapeError("channel_shuffle: channel count " + std::to_string(channels) + " not divisible by groups " +
                     std::to_string(groups));
  }
  const Index per = channels / groups;
  std::vector<Index> perm(static_cast<std::size_t>(channels));
  for (Index j = 0; j < per; ++j) {
    for (Index gi = 0; gi < groups; ++gi) perm[static_cast<std::size_t>(j * groups + gi)] = gi * per + j;
  }
  return perm;
}

template <typename S>
Tensor4<S> permute_channels(const Tensor4<S>& x, const std::vector<Index>& perm) {
  if (static_cast<Index>(perm.size()) != x.c()) throw ShapeError("permute_channels: permutation length != c");
  Tensor4<S> out(x.shape());
  const Index plane = x.h() * x.w();
  for (Index in = 0; in < x.n(); ++in) {
    for (Index oc = 0; oc < x.c(); ++oc) std::copy_n(x.plane(in, perm[static_cast<std::size_t>(oc)]), plane, out.plane(in, oc));
  }
  return out;
}

template <typename S>
Tensor4<S> unpermute_channels(const Tensor4<S>& x, const std::vector<Index>& perm) {
  if (static_cast<Index>(perm.size()) != x.c()) throw ShapeError("unpermute_channels: permutation length != c");
  Tensor4<S> out(x.shape());
  const Index plane = x.h() * x.w();
  for (Index in = 0; in < x.n(); ++in) {
    for (Index ic = 0; ic < x.c(); ++ic) std::copy_n(x.plane(in, ic), plane, out.plane(in, perm[static_cast<std::size_t>(ic)]));
  }
  return out;
}

template <typename S>
Tensor4<S> channel_shuffle(const Tensor4<S>& x, Index groups) {
  return permute_channels(x, shuffle_permutation(x.c(), groups));
}

template <typename S>
Tensor4<S> softmax_lastdim(const Tensor4<S>& x) {
  const Index rows = x.n() * x.c() * x.h();
  CMapRM<S> in(x.data(), rows, x.w());
  Tensor4<S> out(x.shape());
  MapRM<S> y(out.data(), rows, x.w());
  y = (in.colwise() - in.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return out;
}

template <typename S>
Tensor4<S> softmax_lastdim_backward(const Tensor4<S>& y, const Tensor4<S>& grad_out) {
  if (y.shape() != grad_out.shape()) throw ShapeError("softmax_lastdim_backward: shape mismatch");
  const Index rows = y.n() * y.c() * y.h();
  CMapRM<S> ym(y.data(), rows, y.w());
  CMapRM<S> gm(grad_out.data(), rows, y.w());
  Tensor4<S> dx(y.shape());
  const Eigen::Matrix<S, Eigen::Dynamic, 1> dot = ym.cwiseProduct(gm).rowwise().sum();
  MapRM<S>(dx.data(), rows, y.w()) = ym.cwiseProduct(gm.colwise() - dot);
  return dx;
}

template <typename S>
Tensor4<S> layer_norm_channels(const Tensor4<S>& x, const Tensor4<S>& gamma, const Tensor4<S>& beta, S eps) {
  const Shape4 cs{1, x.c(), 1, 1};
  if (gamma.shape() != cs || beta.shape() != cs) {
    throw ShapeError("layer_norm_channels: gamma/beta must be " + to_string(cs));
  }
  Tensor4<S> out(x.shape());
  const Index p = x.h() * x.w();
  const auto g = gamma.array();
  const auto b = beta.array();
  for (Index in = 0; in < x.n(); ++in) {
    CMapRM<S> xm(x.plane(in, 0), x.c(), p);
    const Eigen::Array<S, 1, Eigen::Dynamic> mean = xm.colwise().mean().array();
    const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> centered = xm.array().rowwise() - mean;
    const Eigen::Array<S, 1, Eigen::Dynamic> inv = (centered.square().colwise().mean() + eps).rsqrt();
    MapRM<S> ym(out.plane(in, 0), x.c(), p);
    ym = ((centered.rowwise() * inv).colwise() * g).colwise() + b;
  }
  CAF_ASSERT_FINITE(out);
  return out;
}

template <typename S>
LayerNormGrads<S> layer_norm_channels_backward(const Tensor4<S>& x, const Tensor4<S>& gamma, S eps,
                                               const Tensor4<S>& grad_out) {
  if (grad_out.shape() != x.shape()) throw ShapeError("layer_norm_channels_backward: shape mismatch");
  LayerNormGrads<S> g{Tensor4<S>(x.shape()), Tensor4<S>(gamma.shape()), Tensor4<S>(gamma.shape())};
  const Index c = x.c();
  const Index p = x.h() * x.w();
  const auto gm = gamma.array();
  for (Index in = 0; in < x.n(); ++in) {
    CMapRM<S> xm(x.plane(in, 0), c, p);
    CMapRM<S> dy(grad_out.plane(in, 0), c, p);
    const Eigen::Array<S, 1, Eigen::Dynamic> mean = xm.colwise().mean().array();
    const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> centered = xm.array().rowwise() - mean;
    const Eigen::Array<S, 1, Eigen::Dynamic> inv = (centered.square().colwise().mean() + eps).rsqrt();
    const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> xhat = centered.rowwise() * inv;
    g.gamma.array() += (dy.array() * xhat).rowwise().sum();
    g.beta.array() += dy.array().rowwise().sum();
    const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> dxhat = dy.array().colwise() * gm;
    const Eigen::Array<S, 1, Eigen::Dynamic> mean_dxhat = dxhat.colwise().mean();
    const Eigen::Array<S, 1, Eigen::Dynamic> mean_dxhat_xhat = (dxhat * xhat).colwise().mean();
    MapRM<S> dx(g.input.plane(in, 0), c, p);
    dx = (((dxhat.rowwise() - mean_dxhat) - (xhat.rowwise() * mean_dxhat_xhat)).rowwise() * inv).matrix();
  }
  return g;
}

template <typename S>
Tensor4<S> matmul(const Tensor4<S>& a, const Tensor4<S>& b) {
  if (a.n() != b.n() || a.c() != b.c() || a.w() != b.h()) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()) + " inner dims disagree");
  }
  Tensor4<S> out({a.n(), a.c(), a.h(), b.w()});
  for (Index in = 0; in < a.n(); ++in) {
    for (Index ic = 0; ic < a.c(); ++ic) {
      MapRM<S>(out.plane(in, ic), a.h(), b.w()).noalias() =
          CMapRM<S>(a.plane(in, ic), a.h(), a.w()) * CMapRM<S>(b.plane(in, ic), b.h(), b.w());
    }
  }
  return out;
}

template <typename S>
Tensor4<S> transpose_last2(const Tensor4<S>& x) {
  Tensor4<S> out({x.n(), x.c(), x.w(), x.h()});
  for (Index in = 0; in < x.n(); ++in) {
    for (Index ic = 0; ic < x.c(); ++ic) {
      MapRM<S>(out.plane(in, ic), x.w(), x.h()) = CMapRM<S>(x.plane(in, ic), x.h(), x.w()).transpose();
    }
  }
  return out;
}

template <typename S>
Tensor4<S> slice_channels(const Tensor4<S>& x, Index begin, Index count) {
  if (begin < 0 || count < 1 || begin + count > x.c()) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for c=" + std::to_string(x.c()));
  }
  Tensor4<S> out({x.n(), count, x.h(), x.w()});
  const Index block = count * x.h() * x.w();
  for (Index in = 0; in < x.n(); ++in) std::copy_n(x.plane(in, begin), block, out.plane(in, 0));
  return out;
}

#define CAF_INSTANTIATE(S)                                                                                        \
  template Tensor4<S> conv2d<S>(const Tensor4<S>&, const Tensor4<S>&, const Tensor4<S>*, const ConvGeometry&);    \
  template ConvGrads<S> conv2d_backward<S>(const Tensor4<S>&, const Tensor4<S>&, bool, const ConvGeometry&,      \
                                           const Tensor4<S>&);                                                    \
  template Tensor4<S> conv3d_singleton<S>(const Tensor4<S>&, const Tensor4<S>&, const Tensor4<S>*,               \
                                          const Conv3Geometry&);                                                  \
  template ConvGrads<S> conv3d_singleton_backward<S>(const Tensor4<S>&, const Tensor4<S>&, bool,                 \
                                                     const Conv3Geometry&, const Tensor4<S>&);                    \
  template Tensor4<S> permute_channels<S>(const Tensor4<S>&, const std::vector<Index>&);                         \
  template Tensor4<S> unpermute_channels<S>(const Tensor4<S>&, const std::vector<Index>&);                       \
  template Tensor4<S> channel_shuffle<S>(const Tensor4<S>&, Index);                                              \
  template Tensor4<S> softmax_lastdim<S>(const Tensor4<S>&);                                                     \
  template Tensor4<S> softmax_lastdim_backward<S>(const Tensor4<S>&, const Tensor4<S>&);                         \
  template Tensor4<S> layer_norm_channels<S>(const Tensor4<S>&, const Tensor4<S>&, const Tensor4<S>&, S);        \
  template LayerNormGrads<S> layer_norm_channels_backward<S>(const Tensor4<S>&, const Tensor4<S>&, S,            \
                                                             const Tensor4<S>&);                                  \
  template Tensor4<S> matmul<S>(const Tensor4<S>&, const Tensor4<S>&);                                           \
  template Tensor4<S> transpose_last2<S>(const Tensor4<S>&);                                                     \
  template Tensor4<S> slice_channels<S>(const Tensor4<S>&, Index, Index);

CAF_INSTANTIATE(float)
CAF_INSTANTIATE(double)
#undef CAF_INSTANTIATE

}  // namespace caf
