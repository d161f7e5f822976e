#pragma once

// Toy grid detector: strided conv backbone, optional CAFBlocks, dense 1x1 head.
// Each cell of the stride-8 grid predicts (objectness, dx, dy, log w, log h, class
// logits). Offsets are relative to the cell center in units of the cell size.

#include "caf/autodiff.hpp"
#include "caf/blocks.hpp"
#include "caf/conv_spec.hpp"
#include "caf/io.hpp"
#include "caf/metrics.hpp"
#include "caf/tensor.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace caf {

inline constexpr Index kCellSize = 8;
inline constexpr Index kBoxChannels = 5;  // objectness + 4 box terms

/// Raised when training produces a non-finite loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Synthetic scenes.

struct ClassStyle {
  double radius_min = 3.0;
  double radius_max = 5.0;
  double intensity = 1.0;
};

struct SceneConfig {
  Index height = 64;
  Index width = 64;
  std::vector<ClassStyle> classes = {{3.0, 5.0, 0.95}, {6.0, 8.0, 0.65}, {9.0, 12.0, 0.4}};
  Index min_objects = 1;
  Index max_objects = 4;
  double noise = 0.05;  // std-dev of additive Gaussian noise
  Index blur = 1;       // box-blur radius in px, 0 disables
  std::uint64_t seed = 0;

  Index class_count() const { return static_cast<Index>(classes.size()); }
  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

struct Scene {
  Tensor4<float> image;  // (1, 1, h, w)
  std::vector<DetBox> gts;
};

/// Pure function of (cfg, index). Discs never overlap and never share a grid cell.
Scene gen_scene(const SceneConfig& cfg, std::uint64_t index);

/// Stacks images along n.
Tensor4<float> stack_images(const std::vector<Scene>& scenes);

// Model.

struct DetectorConfig {
  Index classes = 3;
  std::array<Index, 3> widths = {8, 16, 32};
  Index caf_blocks = 1;  // 0 is the baseline without CAFBlock
  CafBlockConfig block;  // block.width is forced to widths[2]
  double objectness_prior = 0.04;

  void validate() const;
};

template <typename Scalar>
struct ToyDetectorParams {
  std::array<ConvSpec<Scalar>, 3> backbone;  // 3x3, stride 2, pad 1, ReLU after each
  std::vector<CafBlockParams<Scalar>> caf;
  ConvSpec<Scalar> head;  // 1x1, widths[2] -> 5 + classes

  bool use_caf_block() const { return !caf.empty(); }
  Index classes() const { return head.out_channels() - kBoxChannels; }

  template <typename Other>
  ToyDetectorParams<Other> cast() const;
};

template <typename Scalar>
ToyDetectorParams<Scalar> init_detector(const DetectorConfig& cfg, std::uint64_t seed);

/// Architecture recovered from parameter shapes (objectness_prior is not recoverable).
template <typename Scalar>
DetectorConfig detector_config(const ToyDetectorParams<Scalar>& p);

/// Raw grid predictions (n, 5 + K, h / 8, w / 8).
template <typename Scalar>
Var<Scalar> detector_forward(Var<Scalar> images, const ToyDetectorParams<Scalar>& p);
template <typename Scalar>
Tensor4<Scalar> detector_forward(const Tensor4<Scalar>& images, const ToyDetectorParams<Scalar>& p);

template <typename P, typename F>
  requires requires(P& p) { p.backbone; p.head; }
void for_each_param(P& p, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < p.backbone.size(); ++i) {
    for_each_param(p.backbone[i], prefix + ".backbone" + std::to_string(i), f);
  }
  for (std::size_t i = 0; i < p.caf.size(); ++i) for_each_param(p.caf[i], prefix + ".caf" + std::to_string(i), f);
  for_each_param(p.head, prefix + ".head", f);
}

// Targets and loss.

/// One assigned ground truth per positive cell.
struct CellTarget {
  Index image = 0;
  Index gy = 0;
  Index gx = 0;
  std::array<double, 4> box{};  // dx, dy, log w, log h
  int class_id = 0;
};

struct GridTargets {
  Index n = 0;
  Index grid_h = 0;
  Index grid_w = 0;
  std::vector<CellTarget> cells;
};

/// Each gt goes to the cell holding its center; when several share a cell the
/// largest-area box is kept (ties by input order).
GridTargets encode_targets(const std::vector<std::vector<DetBox>>& gts, Index grid_h, Index grid_w);

struct LossWeights {
  double objectness = 1.0;
  double box = 5.0;
  double cls = 1.0;
};

/// Per image: BCE(objectness) summed over all cells + box * L1 + cls * CE summed over
/// positive cells. The result is the mean over images, shape (1, 1, 1, 1).
template <typename Scalar>
Var<Scalar> detection_loss(Var<Scalar> preds, const GridTargets& targets, const LossWeights& w = {});
template <typename Scalar>
double detection_loss(const Tensor4<Scalar>& preds, const GridTargets& targets, const LossWeights& w = {});

/// Boxes for image `image` of a prediction batch, per-class NMS applied.
template <typename Scalar>
std::vector<DetBox> decode(const Tensor4<Scalar>& preds, Index image, double conf_thresh, double iou_thresh);

/// Predictions that decode to exactly the given boxes (one per cell).
Tensor4<double> perfect_predictions(const GridTargets& targets, Index classes, double logit = 20.0);

// Training.

struct TrainConfig {
  double lr = 0.01;
  Index batch = 8;
  Index steps = 3000;
  std::uint64_t seed = 1;      // parameter initialization
  Index patience = 10;         // validation checks without improvement before stopping; 0 disables
  Index eval_every = 100;      // steps between validation checks
  Index val_size = 128;
  Index train_set_size = 0;    // 0 streams fresh scenes; otherwise cycles a fixed set
  Index start_step = 0;        // resume position in the data stream
  Index warmup_steps = 0;      // linear learning-rate ramp from 0 over the first steps
  double clip_norm = 10.0;     // global gradient-norm cap, 0 disables

  void validate() const;
};

/// Validation scenes use indices from this base so they never meet training data.
inline constexpr std::uint64_t kValidationIndexBase = std::uint64_t{1} << 40;

struct TrainResult {
  ToyDetectorParams<float> params;  // best by validation loss when validation ran
  std::vector<double> loss_history;  // one entry per step
  std::vector<std::pair<Index, double>> val_history;
  Index steps_run = 0;
  Index best_step = 0;
  bool early_stopped = false;
};

using StepCallback = std::function<void(Index step, double loss)>;

TrainResult train(const TrainConfig& cfg, const SceneConfig& scene, ToyDetectorParams<float> params,
                  const StepCallback& on_step = {});

std::vector<Scene> validation_set(const SceneConfig& scene, Index count);

/// Runs the detector over scenes and evaluates mAP with all classes of the scene.
EvalReport evaluate_detector(const ToyDetectorParams<float>& p, const std::vector<Scene>& scenes,
                             double conf_thresh = 0.001, double iou_thresh = 0.5);

std::vector<std::vector<DetBox>> detect(const ToyDetectorParams<float>& p, const std::vector<Scene>& scenes,
                                        double conf_thresh, double iou_thresh);

// Checkpoints.

struct DetectorCheckpointInfo {
  DetectorConfig config;
  std::uint64_t init_seed = 0;
  std::uint64_t scene_seed = 0;
  Index step = 0;
};

Checkpoint detector_checkpoint(const ToyDetectorParams<float>& p, const DetectorCheckpointInfo& info);
/// Rebuilds the architecture from the config echo, then loads every tensor. Any
/// name, count or dims mismatch throws FormatError.
ToyDetectorParams<float> detector_from_checkpoint(const Checkpoint& ckpt, DetectorCheckpointInfo* info = nullptr);

}  // namespace caf
