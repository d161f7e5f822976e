#include "caf/gradcheck_suite.hpp"

#include "caf/blocks.hpp"
#include "caf/detector.hpp"

#include <algorithm>
#include <random>

namespace caf {
namespace {

using T = Tensor4<double>;
using V = Var<double>;
using Rng = std::mt19937_64;

Index pick(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

T rand_t(const Shape4& s, Rng& rng, double bound = 1.0) { return T::uniform(s, -bound, bound, rng); }

/// Projection weights for the test loss.
T projection(const Shape4& s, Rng& rng) {
  T r(s);
  std::normal_distribution<double> g(0.0, 1.0);
  for (Index i = 0; i < r.size(); ++i) r[i] = g(rng);
  return r;
}

Index divisor_of(Index c, Rng& rng) {
  std::vector<Index> ds;
  for (Index d = 1; d <= c; ++d) {
    if (c % d == 0) ds.push_back(d);
  }
  return ds[static_cast<std::size_t>(pick(rng, 0, static_cast<Index>(ds.size()) - 1))];
}

/// Runs one check: `body` maps bound inputs to the op output, projected to a scalar.
GradCheckReport check(std::vector<T*> params, const std::function<V(Tape<double>&)>& body, Rng& rng,
                      const GradCheckOptions& opts) {
  std::optional<T> proj;
  LossBuilder loss = [&](Tape<double>& tape) {
    V out = body(tape);
    if (out.value().size() == 1) return out;
    if (!proj) proj = projection(out.shape(), rng);
    return dot(out, *proj);
  };
  return grad_check(loss, params, opts);
}

using Case = std::function<GradCheckReport(Rng&, const GradCheckOptions&)>;

struct SuiteEntry {
  std::string name;
  double tolerance;
  Case run;
};

GradCheckReport conv_case(Rng& rng, const GradCheckOptions& o, int kind) {
  const Index n = pick(rng, 1, 2);
  Index cin = pick(rng, 1, 8);
  Index cout = pick(rng, 1, 8);
  ConvGeometry g;
  Index k = pick(rng, 1, 3);
  if (kind == 1) {  // depthwise
    cout = cin;
    g.groups = cin;
    k = 3;
  } else if (kind == 2) {  // pointwise
    k = 1;
  } else {
    g.groups = divisor_of(std::gcd(cin, cout), rng);
    g.stride = {pick(rng, 1, 2), pick(rng, 1, 2)};
    g.dilation = {pick(rng, 1, 2), pick(rng, 1, 2)};
  }
  g.padding = {pick(rng, 0, 2), pick(rng, 0, 2)};
  const Index h = std::max(pick(rng, 2, 6), g.dilation.y * (k - 1) + 1);
  const Index w = std::max(pick(rng, 2, 6), g.dilation.x * (k - 1) + 1);
  T x = rand_t({n, cin, h, w}, rng);
  T wt = rand_t({cout, cin / g.groups, k, k}, rng);
  T b = rand_t({1, cout, 1, 1}, rng);
  const bool with_bias = pick(rng, 0, 1) == 1;
  return check({&x, &wt, &b}, [&](Tape<double>& t) {
    std::optional<V> bias;
    if (with_bias) bias = t.param(b);
    return conv2d(t.param(x), t.param(wt), bias, g);
  }, rng, o);
}

GradCheckReport conv3_case(Rng& rng, const GradCheckOptions& o) {
  const Index cin = pick(rng, 1, 8);
  const Index groups = divisor_of(cin, rng);
  const Index cout = groups * pick(rng, 1, 2);
  Conv3Geometry g{1, {pick(rng, 0, 1), pick(rng, 0, 1)}, groups};
  T x = rand_t({pick(rng, 1, 2), cin, pick(rng, 3, 6), pick(rng, 3, 6)}, rng);
  T wt = rand_t({cout, cin / groups * 3, 3, 3}, rng);
  T b = rand_t({1, cout, 1, 1}, rng);
  return check({&x, &wt, &b}, [&](Tape<double>& t) { return conv3d_singleton(t.param(x), t.param(wt), std::optional<V>(t.param(b)), g); },
               rng, o);
}

Shape4 small_shape(Rng& rng, Index max_c = 8) {
  return {pick(rng, 1, 2), pick(rng, 1, max_c), pick(rng, 1, 6), pick(rng, 1, 6)};
}

GradCheckReport unary_case(Rng& rng, const GradCheckOptions& o, const std::function<V(V)>& op, double bound = 1.0) {
  T x = rand_t(small_shape(rng), rng, bound);
  return check({&x}, [&](Tape<double>& t) { return op(t.param(x)); }, rng, o);
}

GradCheckReport binary_case(Rng& rng, const GradCheckOptions& o, const std::function<V(V, V)>& op) {
  const Shape4 s = small_shape(rng);
  T a = rand_t(s, rng);
  T b = rand_t(s, rng);
  return check({&a, &b}, [&](Tape<double>& t) { return op(t.param(a), t.param(b)); }, rng, o);
}

GradCheckReport shuffle_case(Rng& rng, const GradCheckOptions& o) {
  Shape4 s = small_shape(rng);
  const Index g = divisor_of(s.c, rng);
  T x = rand_t(s, rng);
  return check({&x}, [&](Tape<double>& t) { return channel_shuffle(t.param(x), g); }, rng, o);
}

GradCheckReport layer_norm_case(Rng& rng, const GradCheckOptions& o) {
  Shape4 s = small_shape(rng);
  s.c = std::max<Index>(s.c, 2);
  T x = rand_t(s, rng, 2.0);
  T gamma = rand_t({1, s.c, 1, 1}, rng);
  T beta = rand_t({1, s.c, 1, 1}, rng);
  return check({&x, &gamma, &beta},
               [&](Tape<double>& t) { return layer_norm_channels(t.param(x), t.param(gamma), t.param(beta), 1e-5); },
               rng, o);
}

GradCheckReport matmul_case(Rng& rng, const GradCheckOptions& o) {
  const Index n = pick(rng, 1, 2);
  const Index c = pick(rng, 1, 3);
  const Index m = pick(rng, 1, 6);
  const Index k = pick(rng, 1, 6);
  const Index p = pick(rng, 1, 6);
  T a = rand_t({n, c, m, k}, rng);
  T b = rand_t({n, c, k, p}, rng);
  return check({&a, &b}, [&](Tape<double>& t) { return matmul(t.param(a), t.param(b)); }, rng, o);
}

GradCheckReport reshape_case(Rng& rng, const GradCheckOptions& o) {
  const Shape4 s = small_shape(rng);
  const Shape4 to{s.n, 1, s.c, s.h * s.w};
  T x = rand_t(s, rng);
  return check({&x}, [&](Tape<double>& t) { return reshape(t.param(x), to); }, rng, o);
}

GradCheckReport slice_case(Rng& rng, const GradCheckOptions& o) {
  Shape4 s = small_shape(rng);
  const Index begin = pick(rng, 0, s.c - 1);
  const Index count = pick(rng, 1, s.c - begin);
  T x = rand_t(s, rng);
  return check({&x}, [&](Tape<double>& t) { return slice_channels(t.param(x), begin, count); }, rng, o);
}

GradCheckReport scale_by_case(Rng& rng, const GradCheckOptions& o) {
  T x = rand_t(small_shape(rng), rng);
  T s = rand_t({1, 1, 1, 1}, rng);
  return check({&x, &s}, [&](Tape<double>& t) { return scale_by(t.param(x), t.param(s)); }, rng, o);
}

GradCheckReport dot_case(Rng& rng, const GradCheckOptions& o) {
  T x = rand_t(small_shape(rng), rng);
  const T r = projection(x.shape(), rng);
  return check({&x}, [&](Tape<double>& t) { return dot(t.param(x), r); }, rng, o);
}

// Block components: every parameter tensor plus the input is checked.

struct BlockCase {
  CafBlockParams<double> p;
  T x;
};

BlockCase block_case(Rng& rng) {
  CafBlockConfig cfg;
  cfg.width = pick(rng, 2, 8);
  cfg.hidden = cfg.width * pick(rng, 1, 2);
  BlockCase c{init_caf_block<double>(cfg, rng), {}};
  // Randomize what initialization leaves at constants so biases and norms are exercised.
  for_each_param(c.p, "b", [&](const std::string&, T& t, const Dims&) {
    if (t.size() > 1) t.array() += rand_t(t.shape(), rng, 0.2).array();
  });
  c.p.acfm.log_alpha[0] += 0.3;
  c.x = rand_t({pick(rng, 1, 2), cfg.width, pick(rng, 2, 6), pick(rng, 2, 6)}, rng, 2.0);
  return c;
}

template <typename P>
std::vector<T*> tensors(P& p, T& x) {
  std::vector<T*> out{&x};
  for_each_param(p, "b", [&](const std::string&, T& t, const Dims&) { out.push_back(&t); });
  return out;
}

template <typename Sub, typename Fwd>
GradCheckReport sub_case(Rng& rng, const GradCheckOptions& o, Sub&& select, Fwd&& fwd) {
  BlockCase c = block_case(rng);
  auto& params = select(c.p);
  return check(tensors(params, c.x), [&](Tape<double>& t) { return fwd(t.param(c.x), params); }, rng, o);
}

GradCheckReport detector_case(Rng& rng, const GradCheckOptions& o) {
  DetectorConfig cfg;
  cfg.classes = pick(rng, 1, 3);
  cfg.widths = {3, 4, 8};
  cfg.caf_blocks = pick(rng, 0, 1);
  ToyDetectorParams<double> p = init_detector<double>(cfg, rng());
  // Positive backbone biases keep some units alive everywhere; a position where every
  // channel is dead feeds LayerNorm a zero-variance input, whose curvature (scale
  // sqrt(eps_ln)) is too sharp for central differences.
  for (ConvSpec<double>& c : p.backbone) c.bias->array() += T::uniform(c.bias->shape(), 0.05, 0.3, rng).array();
  SceneConfig scene;
  scene.height = scene.width = 16;
  scene.classes.resize(static_cast<std::size_t>(cfg.classes));
  for (ClassStyle& c : scene.classes) c.radius_max = std::min(c.radius_max, 4.0), c.radius_min = std::min(c.radius_min, 2.0);
  scene.max_objects = 2;
  scene.seed = rng();
  std::vector<Scene> scenes{gen_scene(scene, 0), gen_scene(scene, 1)};
  T x = stack_images(scenes).cast<double>();
  std::vector<std::vector<DetBox>> gts{scenes[0].gts, scenes[1].gts};
  const GridTargets targets = encode_targets(gts, 2, 2);
  std::vector<T*> params;
  for_each_param(p, "d", [&](const std::string&, T& t, const Dims&) { params.push_back(&t); });
  // The projection term keeps parameter gradients from cancelling to exactly zero
  // (balanced L1 signs, single-class cross-entropy), where the numeric estimate is
  // pure roundoff.
  const T r = projection({2, kBoxChannels + cfg.classes, 2, 2}, rng);
  return check(params, [&](Tape<double>& t) {
    V preds = detector_forward(t.leaf(x), p);
    return detection_loss(preds, targets) + scale(dot(preds, r), 0.1);
  }, rng, o);
}

std::vector<SuiteEntry> suite() {
  const double tol = 1e-4;
  return {
      {"conv2d", tol, [](Rng& r, const GradCheckOptions& o) { return conv_case(r, o, 0); }},
      {"conv2d_depthwise", tol, [](Rng& r, const GradCheckOptions& o) { return conv_case(r, o, 1); }},
      {"conv2d_pointwise", tol, [](Rng& r, const GradCheckOptions& o) { return conv_case(r, o, 2); }},
      {"conv3d_singleton", tol, conv3_case},
      {"channel_shuffle", tol, shuffle_case},
      {"softmax_lastdim", tol,
       [](Rng& r, const GradCheckOptions& o) { return unary_case(r, o, [](V x) { return softmax_lastdim(x); }, 3.0); }},
      {"layer_norm", tol, layer_norm_case},
      {"relu", tol, [](Rng& r, const GradCheckOptions& o) { return unary_case(r, o, [](V x) { return relu(x); }); }},
      {"add", tol, [](Rng& r, const GradCheckOptions& o) { return binary_case(r, o, [](V a, V b) { return a + b; }); }},
      {"mul", tol, [](Rng& r, const GradCheckOptions& o) { return binary_case(r, o, [](V a, V b) { return a * b; }); }},
      {"matmul", tol, matmul_case},
      {"transpose_last2", tol,
       [](Rng& r, const GradCheckOptions& o) { return unary_case(r, o, [](V x) { return transpose_last2(x); }); }},
      {"reshape", tol, reshape_case},
      {"slice_channels", tol, slice_case},
      {"scale", tol, [](Rng& r, const GradCheckOptions& o) { return unary_case(r, o, [](V x) { return scale(x, -1.7); }); }},
      {"scale_by", tol, scale_by_case},
      {"exp", tol, [](Rng& r, const GradCheckOptions& o) { return unary_case(r, o, [](V x) { return exp(x); }, 2.0); }},
      {"sum", tol, [](Rng& r, const GradCheckOptions& o) { return unary_case(r, o, [](V x) { return sum(x * x); }); }},
      {"dot", tol, dot_case},
      {"channel_attention_map", tol,
       [](Rng& r, const GradCheckOptions& o) {
         return sub_case(r, o, [](auto& p) -> auto& { return p.acfm; },
                         [](V x, const AcfmParams<double>& p) { return channel_attention_map(x, p); });
       }},
      {"acfm_global", tol,
       [](Rng& r, const GradCheckOptions& o) {
         return sub_case(r, o, [](auto& p) -> auto& { return p.acfm; },
                         [](V x, const AcfmParams<double>& p) { return acfm_global(x, p); });
       }},
      {"acfm_local", tol,
       [](Rng& r, const GradCheckOptions& o) {
         return sub_case(r, o, [](auto& p) -> auto& { return p.acfm; },
                         [](V x, const AcfmParams<double>& p) { return acfm_local(x, p); });
       }},
      {"acfm_forward", tol,
       [](Rng& r, const GradCheckOptions& o) {
         return sub_case(r, o, [](auto& p) -> auto& { return p.acfm; },
                         [](V x, const AcfmParams<double>& p) { return acfm_forward(x, p); });
       }},
      {"msnn_forward", tol,
       [](Rng& r, const GradCheckOptions& o) {
         return sub_case(r, o, [](auto& p) -> auto& { return p.msnn; },
                         [](V x, const MsnnParams<double>& p) { return msnn_forward(x, p); });
       }},
      {"caf_block_forward", tol,
       [](Rng& r, const GradCheckOptions& o) {
         return sub_case(r, o, [](auto& p) -> auto& { return p; },
                         [](V x, const CafBlockParams<double>& p) { return caf_block_forward(x, p); });
       }},
      {"detection_loss_forward", 1e-3, detector_case},
  };
}

}  // namespace

std::vector<std::string> gradient_suite_ops() {
  std::vector<std::string> names;
  for (const SuiteEntry& e : suite()) names.push_back(e.name);
  return names;
}

std::vector<OpCheck> run_gradient_suite(const SuiteOptions& opts, const std::function<void(const OpCheck&)>& on_done) {
  std::vector<OpCheck> out;
  std::uint64_t op_index = 0;
  for (const SuiteEntry& e : suite()) {
    ++op_index;
    if (!opts.filter.empty() && e.name.find(opts.filter) == std::string::npos) continue;
    OpCheck r;
    r.op = e.name;
    r.tolerance = e.tolerance;
    Rng rng(opts.seed * 1000003 + op_index);
    for (std::size_t i = 0; i < opts.instances; ++i) {
      GradCheckOptions go;
      go.samples_per_tensor = opts.samples_per_tensor;
      go.seed = rng();
      const GradCheckReport rep = e.run(rng, go);
      ++r.instances;
      r.checked += rep.checked;
      r.skipped_kinks += rep.skipped_kinks;
      if (rep.max_rel_error >= r.max_rel_error) {
        r.max_rel_error = rep.max_rel_error;
        r.worst = "instance " + std::to_string(i) + ", " + rep.worst;
      }
    }
    if (on_done) on_done(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace caf
