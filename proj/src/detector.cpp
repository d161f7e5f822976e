#include "caf/detector.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>

namespace caf {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

// Separable box blur with clamped borders.
void box_blur(Tensor4<float>& img, Index radius) {
  if (radius <= 0) return;
  const Index h = img.h();
  const Index w = img.w();
  const float norm = 1.0f / static_cast<float>(2 * radius + 1);
  Tensor4<float> tmp(img.shape());
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      float s = 0.0f;
      for (Index k = -radius; k <= radius; ++k) s += img(0, 0, y, std::clamp<Index>(x + k, 0, w - 1));
      tmp(0, 0, y, x) = s * norm;
    }
  }
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      float s = 0.0f;
      for (Index k = -radius; k <= radius; ++k) s += tmp(0, 0, std::clamp<Index>(y + k, 0, h - 1), x);
      img(0, 0, y, x) = s * norm;
    }
  }
}

}  // namespace

void SceneConfig::validate() const {
  require(height >= 1 && width >= 1, "scene: image size must be positive");
  require(!classes.empty(), "scene: at least one class is required");
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const ClassStyle& c = classes[k];
    const std::string id = "scene: class " + std::to_string(k);
    require(c.radius_min > 0.0 && c.radius_min <= c.radius_max, id + " radius range must satisfy 0 < min <= max");
    require(2.0 * c.radius_max <= static_cast<double>(std::min(height, width)), id + " radius does not fit the image");
    require(std::isfinite(c.intensity), id + " intensity must be finite");
  }
  require(min_objects >= 0 && max_objects >= min_objects, "scene: object count range must satisfy 0 <= min <= max");
  require(noise >= 0.0 && std::isfinite(noise), "scene: noise must be finite and >= 0");
  require(blur >= 0, "scene: blur radius must be >= 0");
}

Scene gen_scene(const SceneConfig& cfg, std::uint64_t index) {
  cfg.validate();
  std::mt19937_64 rng(splitmix64(splitmix64(cfg.seed) ^ index));
  std::uniform_int_distribution<Index> count_dist(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> class_dist(0, static_cast<int>(cfg.class_count()) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  struct Disc {
    double cx, cy, r;
    int cls;
  };
  std::vector<Disc> discs;
  const Index wanted = count_dist(rng);
  const auto H = static_cast<double>(cfg.height);
  const auto W = static_cast<double>(cfg.width);
  constexpr int kAttempts = 200;
  for (Index o = 0; o < wanted; ++o) {
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      const int cls = class_dist(rng);
      const ClassStyle& style = cfg.classes[static_cast<std::size_t>(cls)];
      const double r = style.radius_min + (style.radius_max - style.radius_min) * unit(rng);
      const double cx = r + (W - 2.0 * r) * unit(rng);
      const double cy = r + (H - 2.0 * r) * unit(rng);
      const auto cell = [](double v) { return static_cast<Index>(std::floor(v / kCellSize)); };
      const bool clash = std::any_of(discs.begin(), discs.end(), [&](const Disc& d) {
        const bool overlap = std::hypot(d.cx - cx, d.cy - cy) < d.r + r + 1.0;
        const bool same_cell = cell(d.cx) == cell(cx) && cell(d.cy) == cell(cy);
        return overlap || same_cell;
      });
      if (!clash) {
        discs.push_back({cx, cy, r, cls});
        break;
      }
    }
  }

  Scene scene{Tensor4<float>({1, 1, cfg.height, cfg.width}), {}};
  Tensor4<float>& img = scene.image;
  for (const Disc& d : discs) {
    const double intensity = cfg.classes[static_cast<std::size_t>(d.cls)].intensity;
    const auto y0 = std::max<Index>(0, static_cast<Index>(std::floor(d.cy - d.r - 1)));
    const auto y1 = std::min<Index>(cfg.height - 1, static_cast<Index>(std::ceil(d.cy + d.r + 1)));
    const auto x0 = std::max<Index>(0, static_cast<Index>(std::floor(d.cx - d.r - 1)));
    const auto x1 = std::min<Index>(cfg.width - 1, static_cast<Index>(std::ceil(d.cx + d.r + 1)));
    for (Index y = y0; y <= y1; ++y) {
      for (Index x = x0; x <= x1; ++x) {
        const double dist = std::hypot(static_cast<double>(x) + 0.5 - d.cx, static_cast<double>(y) + 0.5 - d.cy);
        const double cover = std::clamp(d.r + 0.5 - dist, 0.0, 1.0);
        img(0, 0, y, x) += static_cast<float>(intensity * cover);
      }
    }
    scene.gts.push_back({d.cx - d.r, d.cy - d.r, d.cx + d.r, d.cy + d.r, d.cls, 1.0});
  }
  box_blur(img, cfg.blur);
  if (cfg.noise > 0.0) {
    std::normal_distribution<double> gauss(0.0, cfg.noise);
    for (Index i = 0; i < img.size(); ++i) img[i] += static_cast<float>(gauss(rng));
  }
  return scene;
}

Tensor4<float> stack_images(const std::vector<Scene>& scenes) {
  if (scenes.empty()) throw ShapeError("stack_images: no scenes");
  const Shape4 s = scenes.front().image.shape();
  Tensor4<float> out({static_cast<Index>(scenes.size()), s.c, s.h, s.w});
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (scenes[i].image.shape() != s) throw ShapeError("stack_images: images differ in shape");
    std::copy_n(scenes[i].image.data(), s.count(), out.data() + static_cast<Index>(i) * s.count());
  }
  return out;
}

// Model.

void DetectorConfig::validate() const {
  require(classes >= 1, "detector: classes must be >= 1");
  require(std::all_of(widths.begin(), widths.end(), [](Index w) { return w >= 1; }), "detector: widths must be >= 1");
  require(caf_blocks >= 0, "detector: caf_blocks must be >= 0");
  require(objectness_prior > 0.0 && objectness_prior < 1.0, "detector: objectness prior must lie in (0, 1)");
  if (caf_blocks > 0) {
    CafBlockConfig b = block;
    b.width = widths[2];
    require(b.resolved_groups() >= 1 && b.width % b.resolved_groups() == 0,
            "detector: block width not divisible by shuffle groups");
    require(b.resolved_hidden() >= b.width, "detector: hidden width must be >= block width");
    require(b.dilation_n1 >= 1 && b.dilation_n2 >= 1, "detector: dilations must be >= 1");
  }
}

template <typename S>
ToyDetectorParams<S> init_detector(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ToyDetectorParams<S> p;
  const ConvGeometry down{{2, 2}, {1, 1}, {1, 1}, 1};
  Index in = 1;
  for (std::size_t i = 0; i < p.backbone.size(); ++i) {
    p.backbone[i] = make_conv<S>(in, cfg.widths[i], 3, 3, down, rng);
    in = cfg.widths[i];
  }
  CafBlockConfig block = cfg.block;
  block.width = cfg.widths[2];
  for (Index b = 0; b < cfg.caf_blocks; ++b) p.caf.push_back(init_caf_block<S>(block, rng));
  p.head = make_conv<S>(cfg.widths[2], kBoxChannels + cfg.classes, 1, 1, {}, rng, 1.0);
  (*p.head.bias)[0] = static_cast<S>(std::log(cfg.objectness_prior / (1.0 - cfg.objectness_prior)));
  return p;
}

template <typename S>
DetectorConfig detector_config(const ToyDetectorParams<S>& p) {
  DetectorConfig cfg;
  cfg.classes = p.classes();
  for (std::size_t i = 0; i < p.backbone.size(); ++i) cfg.widths[i] = p.backbone[i].out_channels();
  cfg.caf_blocks = static_cast<Index>(p.caf.size());
  if (!p.caf.empty()) {
    const CafBlockParams<S>& b = p.caf.front();
    cfg.block.width = b.width();
    cfg.block.hidden = b.msnn.hidden();
    cfg.block.shuffle_groups = b.acfm.shuffle_groups;
    cfg.block.dilation_n1 = b.msnn.dil_n1.geom.dilation.y;
    cfg.block.dilation_n2 = b.msnn.dil_n2.geom.dilation.y;
  } else {
    cfg.block.width = cfg.widths[2];
  }
  return cfg;
}

template <typename S>
template <typename Other>
ToyDetectorParams<Other> ToyDetectorParams<S>::cast() const {
  ToyDetectorParams<Other> out = init_detector<Other>(detector_config(*this), 0);
  std::vector<const Tensor4<S>*> src;
  for_each_param(*this, "p", [&](const std::string&, const Tensor4<S>& t, const Dims&) { src.push_back(&t); });
  std::size_t i = 0;
  for_each_param(out, "p", [&](const std::string&, Tensor4<Other>& t, const Dims&) { t = src[i++]->template cast<Other>(); });
  for (std::size_t b = 0; b < caf.size(); ++b) {
    out.caf[b].ln1.eps = static_cast<Other>(caf[b].ln1.eps);
    out.caf[b].ln2.eps = static_cast<Other>(caf[b].ln2.eps);
  }
  return out;
}

template <typename S>
Var<S> detector_forward(Var<S> images, const ToyDetectorParams<S>& p) {
  const Shape4 s = images.shape();
  if (s.c != 1) throw ShapeError("detector_forward: expected 1 input channel, got c=" + std::to_string(s.c));
  if (s.h % kCellSize != 0 || s.w % kCellSize != 0) {
    throw ShapeError("detector_forward: image size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is not divisible by " + std::to_string(kCellSize));
  }
  Var<S> x = images;
  for (const ConvSpec<S>& conv : p.backbone) x = relu(conv2d(x, conv));
  for (const CafBlockParams<S>& block : p.caf) x = caf_block_forward(x, block);
  return conv2d(x, p.head);
}

template <typename S>
Tensor4<S> detector_forward(const Tensor4<S>& images, const ToyDetectorParams<S>& p) {
  Tape<S> tape;
  return detector_forward(tape.leaf(images), p).value();
}

// Targets and loss.

GridTargets encode_targets(const std::vector<std::vector<DetBox>>& gts, Index grid_h, Index grid_w) {
  if (grid_h < 1 || grid_w < 1) throw ShapeError("encode_targets: grid must be non-empty");
  GridTargets out{static_cast<Index>(gts.size()), grid_h, grid_w, {}};
  constexpr double kMinSize = 1e-6;
  const auto cs = static_cast<double>(kCellSize);
  for (std::size_t img = 0; img < gts.size(); ++img) {
    std::vector<const DetBox*> owner(static_cast<std::size_t>(grid_h * grid_w), nullptr);
    for (const DetBox& b : gts[img]) {
      const double cx = 0.5 * (b.x1 + b.x2);
      const double cy = 0.5 * (b.y1 + b.y2);
      const Index gx = std::clamp<Index>(static_cast<Index>(std::floor(cx / cs)), 0, grid_w - 1);
      const Index gy = std::clamp<Index>(static_cast<Index>(std::floor(cy / cs)), 0, grid_h - 1);
      const DetBox*& slot = owner[static_cast<std::size_t>(gy * grid_w + gx)];
      if (!slot || b.area() > slot->area()) slot = &b;
    }
    for (Index gy = 0; gy < grid_h; ++gy) {
      for (Index gx = 0; gx < grid_w; ++gx) {
        const DetBox* b = owner[static_cast<std::size_t>(gy * grid_w + gx)];
        if (!b) continue;
        CellTarget t;
        t.image = static_cast<Index>(img);
        t.gy = gy;
        t.gx = gx;
        t.box = {0.5 * (b->x1 + b->x2) / cs - (static_cast<double>(gx) + 0.5),
                 0.5 * (b->y1 + b->y2) / cs - (static_cast<double>(gy) + 0.5),
                 std::log(std::max(b->width(), kMinSize) / cs), std::log(std::max(b->height(), kMinSize) / cs)};
        t.class_id = b->class_id;
        out.cells.push_back(t);
      }
    }
  }
  return out;
}

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void check_targets(const Shape4& s, const GridTargets& t) {
  if (s.c <= kBoxChannels) throw ShapeError("detection_loss: predictions need more than 5 channels, got c=" + std::to_string(s.c));
  if (t.n != s.n || t.grid_h != s.h || t.grid_w != s.w) {
    throw ShapeError("detection_loss: targets for " + std::to_string(t.n) + " images on a " + std::to_string(t.grid_h) +
                     "x" + std::to_string(t.grid_w) + " grid do not match predictions " + to_string(s));
  }
  const Index classes = s.c - kBoxChannels;
  for (const CellTarget& c : t.cells) {
    if (c.class_id < 0 || c.class_id >= classes) {
      throw std::invalid_argument("detection_loss: class id " + std::to_string(c.class_id) + " outside [0, " +
                                  std::to_string(classes) + ")");
    }
  }
}

struct LossEval {
  double value = 0.0;
  Tensor4<double> grad;             // d loss / d preds
  std::vector<std::uint8_t> signs;  // which side of |d| each box residual took
};

template <typename S>
LossEval eval_loss(const Tensor4<S>& preds, const GridTargets& targets, const LossWeights& w) {
  const Shape4 s = preds.shape();
  check_targets(s, targets);
  const Index classes = s.c - kBoxChannels;
  const double inv_n = 1.0 / static_cast<double>(s.n);
  LossEval out{0.0, Tensor4<double>(s), {}};

  std::vector<std::uint8_t> positive(static_cast<std::size_t>(s.n * s.h * s.w), 0);
  for (const CellTarget& c : targets.cells) positive[static_cast<std::size_t>((c.image * s.h + c.gy) * s.w + c.gx)] = 1;

  double total = 0.0;
  for (Index n = 0; n < s.n; ++n) {
    for (Index y = 0; y < s.h; ++y) {
      for (Index x = 0; x < s.w; ++x) {
        const double z = preds(n, 0, y, x);
        const double t = positive[static_cast<std::size_t>((n * s.h + y) * s.w + x)];
        total += w.objectness * (softplus(z) - z * t);
        out.grad(n, 0, y, x) = w.objectness * (sigmoid(z) - t) * inv_n;
      }
    }
  }
  std::vector<double> prob(static_cast<std::size_t>(classes));
  for (const CellTarget& c : targets.cells) {
    for (Index j = 0; j < 4; ++j) {
      const double d = static_cast<double>(preds(c.image, 1 + j, c.gy, c.gx)) - c.box[static_cast<std::size_t>(j)];
      total += w.box * std::abs(d);
      out.grad(c.image, 1 + j, c.gy, c.gx) = w.box * (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) * inv_n;
      out.signs.push_back(d > 0 ? 2 : d < 0 ? 0 : 1);
    }
    double m = -std::numeric_limits<double>::infinity();
    for (Index k = 0; k < classes; ++k) m = std::max(m, static_cast<double>(preds(c.image, kBoxChannels + k, c.gy, c.gx)));
    double denom = 0.0;
    for (Index k = 0; k < classes; ++k) {
      prob[static_cast<std::size_t>(k)] = std::exp(preds(c.image, kBoxChannels + k, c.gy, c.gx) - m);
      denom += prob[static_cast<std::size_t>(k)];
    }
    total += w.cls * (m + std::log(denom) - preds(c.image, kBoxChannels + c.class_id, c.gy, c.gx));
    for (Index k = 0; k < classes; ++k) {
      const double pk = prob[static_cast<std::size_t>(k)] / denom;
      out.grad(c.image, kBoxChannels + k, c.gy, c.gx) = w.cls * (pk - (k == c.class_id ? 1.0 : 0.0)) * inv_n;
    }
  }
  out.value = total * inv_n;
  return out;
}

}  // namespace

template <typename S>
Var<S> detection_loss(Var<S> preds, const GridTargets& targets, const LossWeights& w) {
  Tape<S>& t = *preds.tape;
  LossEval e = eval_loss(preds.value(), targets, w);
  t.note_branches(e.signs);
  auto grad = std::make_shared<Tensor4<S>>(e.grad.template cast<S>());
  return t.record("detection_loss", Tensor4<S>::constant({1, 1, 1, 1}, static_cast<S>(e.value)), {preds.id},
                  [pi = preds.id, grad](const Tensor4<S>& g, typename Tape<S>::Sink& sink) {
                    Tensor4<S> d = *grad;
                    d.array() *= g[0];
                    sink.add(pi, std::move(d));
                  });
}

template <typename S>
double detection_loss(const Tensor4<S>& preds, const GridTargets& targets, const LossWeights& w) {
  return eval_loss(preds, targets, w).value;
}

template <typename S>
std::vector<DetBox> decode(const Tensor4<S>& preds, Index image, double conf_thresh, double iou_thresh) {
  const Shape4 s = preds.shape();
  if (s.c <= kBoxChannels) throw ShapeError("decode: predictions need more than 5 channels");
  if (image < 0 || image >= s.n) throw ShapeError("decode: image index out of range");
  if (!(conf_thresh >= 0.0 && conf_thresh <= 1.0) || !(iou_thresh >= 0.0 && iou_thresh <= 1.0)) {
    throw std::invalid_argument("decode: thresholds must lie in [0, 1]");
  }
  constexpr double kMaxLogSize = 6.0;
  const Index classes = s.c - kBoxChannels;
  const auto cs = static_cast<double>(kCellSize);
  const double img_w = static_cast<double>(s.w) * cs;
  const double img_h = static_cast<double>(s.h) * cs;
  std::vector<DetBox> boxes;
  for (Index y = 0; y < s.h; ++y) {
    for (Index x = 0; x < s.w; ++x) {
      const double obj = sigmoid(preds(image, 0, y, x));
      double m = -std::numeric_limits<double>::infinity();
      int best = 0;
      for (Index k = 0; k < classes; ++k) {
        const double l = preds(image, kBoxChannels + k, y, x);
        if (l > m) {
          m = l;
          best = static_cast<int>(k);
        }
      }
      double denom = 0.0;
      for (Index k = 0; k < classes; ++k) denom += std::exp(preds(image, kBoxChannels + k, y, x) - m);
      const double score = obj / denom;
      if (!(score > conf_thresh)) continue;
      const double cx = (static_cast<double>(x) + 0.5 + preds(image, 1, y, x)) * cs;
      const double cy = (static_cast<double>(y) + 0.5 + preds(image, 2, y, x)) * cs;
      const double bw = cs * std::exp(std::clamp<double>(preds(image, 3, y, x), -kMaxLogSize, kMaxLogSize));
      const double bh = cs * std::exp(std::clamp<double>(preds(image, 4, y, x), -kMaxLogSize, kMaxLogSize));
      DetBox b{std::clamp(cx - 0.5 * bw, 0.0, img_w), std::clamp(cy - 0.5 * bh, 0.0, img_h),
               std::clamp(cx + 0.5 * bw, 0.0, img_w), std::clamp(cy + 0.5 * bh, 0.0, img_h), best,
               std::clamp(score, 0.0, 1.0)};
      if (b.valid()) boxes.push_back(b);
    }
  }
  return nms_per_class(boxes, iou_thresh);
}

Tensor4<double> perfect_predictions(const GridTargets& targets, Index classes, double logit) {
  Tensor4<double> p({targets.n, kBoxChannels + classes, targets.grid_h, targets.grid_w});
  for (Index n = 0; n < targets.n; ++n) {
    for (Index y = 0; y < targets.grid_h; ++y) {
      for (Index x = 0; x < targets.grid_w; ++x) p(n, 0, y, x) = -logit;
    }
  }
  for (const CellTarget& c : targets.cells) {
    p(c.image, 0, c.gy, c.gx) = logit;
    for (Index j = 0; j < 4; ++j) p(c.image, 1 + j, c.gy, c.gx) = c.box[static_cast<std::size_t>(j)];
    for (Index k = 0; k < classes; ++k) p(c.image, kBoxChannels + k, c.gy, c.gx) = k == c.class_id ? logit : -logit;
  }
  return p;
}

// Training.

void TrainConfig::validate() const {
  require(std::isfinite(lr) && lr >= 0.0, "train: learning rate must be finite and >= 0");
  require(batch >= 1, "train: batch must be >= 1");
  require(steps >= 0, "train: steps must be >= 0");
  require(patience >= 0, "train: patience must be >= 0");
  require(eval_every >= 1, "train: eval interval must be >= 1");
  require(val_size >= 0, "train: validation size must be >= 0");
  require(train_set_size >= 0, "train: training set size must be >= 0");
  require(start_step >= 0, "train: start step must be >= 0");
  require(warmup_steps >= 0, "train: warmup steps must be >= 0");
  require(std::isfinite(clip_norm) && clip_norm >= 0.0, "train: clip norm must be finite and >= 0");
}

std::vector<Scene> validation_set(const SceneConfig& scene, Index count) {
  std::vector<Scene> out;
  for (Index i = 0; i < count; ++i) out.push_back(gen_scene(scene, kValidationIndexBase + static_cast<std::uint64_t>(i)));
  return out;
}

namespace {

constexpr std::size_t kInferenceBatch = 32;

template <typename Fn>
void for_each_chunk(const std::vector<Scene>& scenes, Fn&& fn) {
  for (std::size_t first = 0; first < scenes.size(); first += kInferenceBatch) {
    const std::size_t last = std::min(scenes.size(), first + kInferenceBatch);
    std::vector<Scene> chunk(scenes.begin() + static_cast<std::ptrdiff_t>(first),
                             scenes.begin() + static_cast<std::ptrdiff_t>(last));
    fn(chunk);
  }
}

std::vector<std::vector<DetBox>> gts_of(const std::vector<Scene>& scenes) {
  std::vector<std::vector<DetBox>> gts;
  for (const Scene& s : scenes) gts.push_back(s.gts);
  return gts;
}

double mean_loss(const ToyDetectorParams<float>& p, const std::vector<Scene>& scenes) {
  double total = 0.0;
  for_each_chunk(scenes, [&](const std::vector<Scene>& chunk) {
    const Tensor4<float> preds = detector_forward(stack_images(chunk), p);
    const GridTargets t = encode_targets(gts_of(chunk), preds.h(), preds.w());
    total += detection_loss(preds, t) * static_cast<double>(chunk.size());
  });
  return total / static_cast<double>(scenes.size());
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const SceneConfig& scene, ToyDetectorParams<float> params,
                  const StepCallback& on_step) {
  cfg.validate();
  scene.validate();
  if (params.classes() != scene.class_count()) {
    throw std::invalid_argument("train: detector predicts " + std::to_string(params.classes()) +
                                " classes but the scene has " + std::to_string(scene.class_count()));
  }
  const std::vector<Scene> val = validation_set(scene, cfg.val_size);

  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(cfg.steps));
  std::optional<ToyDetectorParams<float>> best;
  double best_val = std::numeric_limits<double>::infinity();
  Index stale = 0;

  for (Index s = 0; s < cfg.steps; ++s) {
    const Index step = cfg.start_step + s;
    std::vector<Scene> batch;
    for (Index i = 0; i < cfg.batch; ++i) {
      auto index = static_cast<std::uint64_t>(step * cfg.batch + i);
      if (cfg.train_set_size > 0) index %= static_cast<std::uint64_t>(cfg.train_set_size);
      batch.push_back(gen_scene(scene, index));
    }

    Tape<float> tape;
    Var<float> preds = detector_forward(tape.leaf(stack_images(batch)), params);
    Var<float> loss = detection_loss(preds, encode_targets(gts_of(batch), preds.shape().h, preds.shape().w));
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw NumericalError("train: loss is not finite at step " + std::to_string(step) + " (last finite loss " +
                           (result.loss_history.empty() ? std::string("n/a") : std::to_string(result.loss_history.back())) +
                           ")");
    }
    result.loss_history.push_back(value);
    const GradStore<float> grads = tape.backward(loss);
    if (cfg.lr > 0.0) {
      double lr = cfg.lr;
      if (step < cfg.warmup_steps) lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
      if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for_each_param(params, "p", [&](const std::string&, Tensor4<float>& t, const Dims&) {
          if (auto v = tape.find_param(t)) sq += grads[*v].array().template cast<double>().square().sum();
        });
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) lr *= cfg.clip_norm / norm;
      }
      const auto lr_f = static_cast<float>(lr);
      for_each_param(params, "p", [&](const std::string&, Tensor4<float>& t, const Dims&) {
        if (auto v = tape.find_param(t)) t.array() -= lr_f * grads[*v].array();
      });
    }
    result.steps_run = s + 1;
    if (on_step) on_step(step, value);

    if (!val.empty() && (s + 1) % cfg.eval_every == 0) {
      const double v = mean_loss(params, val);
      if (!std::isfinite(v)) throw NumericalError("train: validation loss is not finite at step " + std::to_string(step));
      result.val_history.emplace_back(step + 1, v);
      if (v < best_val) {
        best_val = v;
        best = params;
        result.best_step = step + 1;
        stale = 0;
      } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
        result.early_stopped = true;
        break;
      }
    }
  }
  if (best) {
    result.params = std::move(*best);
  } else {
    result.params = std::move(params);
    result.best_step = cfg.start_step + result.steps_run;
  }
  return result;
}

std::vector<std::vector<DetBox>> detect(const ToyDetectorParams<float>& p, const std::vector<Scene>& scenes,
                                        double conf_thresh, double iou_thresh) {
  std::vector<std::vector<DetBox>> out;
  for_each_chunk(scenes, [&](const std::vector<Scene>& chunk) {
    const Tensor4<float> preds = detector_forward(stack_images(chunk), p);
    for (Index i = 0; i < preds.n(); ++i) out.push_back(decode(preds, i, conf_thresh, iou_thresh));
  });
  return out;
}

EvalReport evaluate_detector(const ToyDetectorParams<float>& p, const std::vector<Scene>& scenes, double conf_thresh,
                             double iou_thresh) {
  std::vector<int> classes(static_cast<std::size_t>(p.classes()));
  std::iota(classes.begin(), classes.end(), 0);
  return evaluate(detect(p, scenes, conf_thresh, iou_thresh), gts_of(scenes), classes);
}

// Checkpoints.

namespace {

constexpr const char* kParamPrefix = "detector";

template <typename T>
T parse_config(const Checkpoint& ckpt, std::string_view key) {
  const std::string& v = ckpt.require(key);
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw FormatError(FormatErrc::shape_mismatch, "checkpoint config '" + std::string(key) + "' has bad value '" + v + "'");
  }
  return out;
}

std::string number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, end};
}

}  // namespace

Checkpoint detector_checkpoint(const ToyDetectorParams<float>& p, const DetectorCheckpointInfo& info) {
  const DetectorConfig arch = detector_config(p);
  Checkpoint ckpt;
  auto put = [&](std::string key, std::string value) { ckpt.config.emplace_back(std::move(key), std::move(value)); };
  put("kind", "detector");
  put("classes", std::to_string(arch.classes));
  for (std::size_t i = 0; i < arch.widths.size(); ++i) put("width" + std::to_string(i), std::to_string(arch.widths[i]));
  put("caf_blocks", std::to_string(arch.caf_blocks));
  put("block_width", std::to_string(arch.block.width));
  put("shuffle_groups", std::to_string(arch.block.resolved_groups()));
  put("n1", std::to_string(arch.block.dilation_n1));
  put("n2", std::to_string(arch.block.dilation_n2));
  put("c_hidden", std::to_string(arch.block.resolved_hidden()));
  put("objectness_prior", number(info.config.objectness_prior));
  put("init_seed", std::to_string(info.init_seed));
  put("scene_seed", std::to_string(info.scene_seed));
  put("step", std::to_string(info.step));
  store_params(p, kParamPrefix, ckpt);
  return ckpt;
}

ToyDetectorParams<float> detector_from_checkpoint(const Checkpoint& ckpt, DetectorCheckpointInfo* info) {
  if (ckpt.require("kind") != "detector") {
    throw FormatError(FormatErrc::shape_mismatch, "checkpoint holds a '" + ckpt.require("kind") + "', not a detector");
  }
  DetectorConfig cfg;
  cfg.classes = parse_config<Index>(ckpt, "classes");
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) cfg.widths[i] = parse_config<Index>(ckpt, "width" + std::to_string(i));
  cfg.caf_blocks = parse_config<Index>(ckpt, "caf_blocks");
  cfg.block.width = parse_config<Index>(ckpt, "block_width");
  cfg.block.shuffle_groups = parse_config<Index>(ckpt, "shuffle_groups");
  cfg.block.dilation_n1 = parse_config<Index>(ckpt, "n1");
  cfg.block.dilation_n2 = parse_config<Index>(ckpt, "n2");
  cfg.block.hidden = parse_config<Index>(ckpt, "c_hidden");
  cfg.objectness_prior = parse_config<double>(ckpt, "objectness_prior");
  if (cfg.block.width != cfg.widths[2]) {
    throw FormatError(FormatErrc::shape_mismatch, "checkpoint block width differs from backbone width");
  }
  ToyDetectorParams<float> p;
  try {
    p = init_detector<float>(cfg, 0);
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatErrc::shape_mismatch, std::string("checkpoint config is invalid: ") + e.what());
  }
  const std::size_t used = load_params(ckpt, 0, kParamPrefix, p);
  if (used != ckpt.entries.size()) {
    throw FormatError(FormatErrc::shape_mismatch,
                      "checkpoint has " + std::to_string(ckpt.entries.size() - used) + " entries beyond the architecture");
  }
  if (info) {
    info->config = cfg;
    info->init_seed = parse_config<std::uint64_t>(ckpt, "init_seed");
    info->scene_seed = parse_config<std::uint64_t>(ckpt, "scene_seed");
    info->step = parse_config<Index>(ckpt, "step");
  }
  return p;
}

#define CAF_INSTANTIATE(S)                                                                                  \
  template ToyDetectorParams<S> init_detector<S>(const DetectorConfig&, std::uint64_t);                     \
  template DetectorConfig detector_config<S>(const ToyDetectorParams<S>&);                                  \
  template Var<S> detector_forward<S>(Var<S>, const ToyDetectorParams<S>&);                                 \
  template Tensor4<S> detector_forward<S>(const Tensor4<S>&, const ToyDetectorParams<S>&);                  \
  template Var<S> detection_loss<S>(Var<S>, const GridTargets&, const LossWeights&);                        \
  template double detection_loss<S>(const Tensor4<S>&, const GridTargets&, const LossWeights&);             \
  template std::vector<DetBox> decode<S>(const Tensor4<S>&, Index, double, double);                         \
  template ToyDetectorParams<float> ToyDetectorParams<S>::cast<float>() const;                              \
  template ToyDetectorParams<double> ToyDetectorParams<S>::cast<double>() const;

CAF_INSTANTIATE(float)
CAF_INSTANTIATE(double)
#undef CAF_INSTANTIATE

}  // namespace caf
