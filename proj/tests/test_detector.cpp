#include "caf/detector.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace caf;

namespace {

SceneConfig centred_disc(double r, Index side, double noise = 0.0, Index blur = 0) {
  SceneConfig s;
  s.height = s.width = side;
  s.classes = {{r, r, 0.9}};
  s.min_objects = s.max_objects = 1;
  s.noise = noise;
  s.blur = blur;
  return s;
}

Bytes param_bytes(const ToyDetectorParams<float>& p) {
  return encode_checkpoint(detector_checkpoint(p, {}));
}

double window_mean(const std::vector<double>& v, std::size_t first, std::size_t count) {
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(first),
                         v.begin() + static_cast<std::ptrdiff_t>(first + count), 0.0) /
         static_cast<double>(count);
}

}  // namespace

TEST(Scenes, EmptyRangeGivesNoObjects) {
  SceneConfig s;
  s.min_objects = s.max_objects = 0;
  Scene sc = gen_scene(s, 3);
  EXPECT_TRUE(sc.gts.empty());
  double mean = 0;
  for (float v : sc.image.values()) mean += v;
  EXPECT_LT(std::abs(mean / static_cast<double>(sc.image.size())), 0.01);
}

TEST(Scenes, Deterministic) {
  SceneConfig s;
  s.seed = 42;
  for (std::uint64_t i : {0ull, 1ull, 12345ull}) {
    Scene a = gen_scene(s, i), b = gen_scene(s, i);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.gts, b.gts);
  }
  EXPECT_FALSE(gen_scene(s, 0).image == gen_scene(s, 1).image);
}

TEST(Scenes, CentredDiscBox) {
  // A disc as wide as the image can only sit at the centre.
  for (double r : {4.0, 8.0, 16.0}) {
    const auto side = static_cast<Index>(2 * r);
    Scene sc = gen_scene(centred_disc(r, side), 0);
    ASSERT_EQ(sc.gts.size(), 1u);
    const DetBox& b = sc.gts[0];
    EXPECT_DOUBLE_EQ(b.x1, 0.0);
    EXPECT_DOUBLE_EQ(b.y1, 0.0);
    EXPECT_DOUBLE_EQ(b.x2, 2 * r);
    EXPECT_DOUBLE_EQ(b.y2, 2 * r);
    double mass = 0;
    for (float v : sc.image.values()) mass += v;
    EXPECT_NEAR(mass, 0.9 * M_PI * r * r, 0.08 * mass);
    EXPECT_FLOAT_EQ(sc.image(0, 0, side / 2 - 1, side / 2), 0.9f);
  }
}

TEST(Scenes, DefaultScenesRespectInvariants) {
  SceneConfig s;
  for (std::uint64_t i = 0; i < 300; ++i) {
    Scene sc = gen_scene(s, i);
    ASSERT_GE(sc.gts.size(), 1u);
    ASSERT_LE(sc.gts.size(), 4u);
    std::set<std::pair<Index, Index>> cells;
    for (const DetBox& b : sc.gts) {
      EXPECT_TRUE(b.valid());
      EXPECT_GE(b.x1, 0.0);
      EXPECT_LE(b.x2, 64.0);
      const auto cx = static_cast<Index>((b.x1 + b.x2) / 2 / kCellSize);
      const auto cy = static_cast<Index>((b.y1 + b.y2) / 2 / kCellSize);
      EXPECT_TRUE(cells.insert({cy, cx}).second);
    }
  }
  SceneConfig bad;
  bad.classes = {{40, 40, 1}};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Detector, OutputShape) {
  auto p = init_detector<float>(DetectorConfig{}, 1);
  std::mt19937_64 rng(1);
  auto x = Tensor4f::uniform({3, 1, 64, 64}, -1.f, 1.f, rng);
  EXPECT_EQ(detector_forward(x, p).shape(), (Shape4{3, 8, 8, 8}));
  EXPECT_EQ(p.classes(), 3);
  EXPECT_TRUE(p.use_caf_block());
  EXPECT_THROW(detector_forward(Tensor4f({1, 2, 64, 64}), p), ShapeError);
}

TEST(Detector, BlockToggleChangesValuesNotShapes) {
  DetectorConfig with, without;
  without.caf_blocks = 0;
  auto a = init_detector<float>(with, 5);
  auto b = init_detector<float>(without, 5);
  EXPECT_FALSE(b.use_caf_block());
  std::mt19937_64 rng(2);
  auto x = Tensor4f::uniform({2, 1, 64, 64}, 0.f, 1.f, rng);
  auto ya = detector_forward(x, a), yb = detector_forward(x, b);
  EXPECT_EQ(ya.shape(), yb.shape());
  EXPECT_GT(max_abs_diff(ya, yb), 1e-3f);
  EXPECT_GT(param_count(a), param_count(b));
}

TEST(Detector, ConfigRecoveredFromParams) {
  DetectorConfig cfg;
  cfg.classes = 2;
  cfg.widths = {4, 8, 12};
  cfg.block.hidden = 30;
  auto p = init_detector<float>(cfg, 3);
  auto back = detector_config(p);
  EXPECT_EQ(back.classes, 2);
  EXPECT_EQ(back.widths, cfg.widths);
  EXPECT_EQ(back.caf_blocks, 1);
  EXPECT_EQ(back.block.resolved_hidden(), 30);
  EXPECT_EQ(back.block.resolved_groups(), 4);
}

TEST(Loss, SaturatedBackgroundIsNearZero) {
  Tensor4d preds({2, 8, 8, 8});
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 64; ++i) preds(n, 0, i / 8, i % 8) = -20;
  GridTargets t = encode_targets({{}, {}}, 8, 8);
  EXPECT_LT(detection_loss(preds, t), 1e-6);
  EXPECT_GE(detection_loss(preds, t), 0.0);
}

TEST(Loss, PerfectPredictionsAreNearZeroAndLossIsNonNegative) {
  SceneConfig s;
  for (std::uint64_t i = 0; i < 20; ++i) {
    Scene sc = gen_scene(s, i);
    GridTargets t = encode_targets({sc.gts}, 8, 8);
    EXPECT_LT(detection_loss(perfect_predictions(t, 3), t), 1e-3);
  }
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    auto preds = Tensor4d::uniform({2, 8, 8, 8}, -5.0, 5.0, rng);
    GridTargets t = encode_targets({gen_scene(s, 100 + k).gts, gen_scene(s, 200 + k).gts}, 8, 8);
    EXPECT_GE(detection_loss(preds, t), 0.0);
  }
}

TEST(Targets, OneCellPerGtAndLargestWins) {
  std::vector<DetBox> gts{{0, 0, 4, 4, 0, 1}, {1, 1, 7, 7, 2, 1}, {20, 20, 30, 30, 1, 1}};
  GridTargets t = encode_targets({gts}, 8, 8);
  ASSERT_EQ(t.cells.size(), 2u);
  EXPECT_EQ(t.cells[0].class_id, 2);
  EXPECT_EQ(t.cells[0].gy, 0);
  EXPECT_EQ(t.cells[1].gx, 3);
}

TEST(Decode, EmptyWhenObjectnessIsOff) {
  Tensor4d preds({1, 8, 8, 8});
  for (Index i = 0; i < 64; ++i) preds(0, 0, i / 8, i % 8) = -20;
  EXPECT_TRUE(decode(preds, 0, 0.5, 0.5).empty());
}

TEST(Decode, OneSaturatedCellGivesOneBox) {
  DetBox gt{18, 34, 28, 42, 1, 1.0};
  GridTargets t = encode_targets({{gt}}, 8, 8);
  auto boxes = decode(perfect_predictions(t, 3), 0, 0.5, 0.5);
  ASSERT_EQ(boxes.size(), 1u);
  EXPECT_EQ(boxes[0].class_id, 1);
  EXPECT_NEAR(boxes[0].x1, gt.x1, 1e-9);
  EXPECT_NEAR(boxes[0].y2, gt.y2, 1e-9);
  EXPECT_GT(boxes[0].score, 0.99);
}

TEST(Decode, EncodeDecodeRoundTrip) {
  SceneConfig s;
  for (std::uint64_t i = 0; i < 200; ++i) {
    Scene sc = gen_scene(s, i);
    GridTargets t = encode_targets({sc.gts}, 8, 8);
    ASSERT_EQ(t.cells.size(), sc.gts.size());
    auto boxes = decode(perfect_predictions(t, 3), 0, 0.5, 0.5);
    ASSERT_EQ(boxes.size(), sc.gts.size());
    for (const DetBox& g : sc.gts) {
      double best = 0;
      for (const DetBox& b : boxes)
        if (b.class_id == g.class_id) best = std::max(best, iou(b, g));
      EXPECT_GT(best, 0.99);
    }
  }
}

TEST(Checkpointing, RoundTripAndMismatch) {
  DetectorConfig cfg;
  cfg.block.hidden = 48;
  auto p = init_detector<float>(cfg, 9);
  DetectorCheckpointInfo info{cfg, 9, 4, 123};
  Checkpoint c = detector_checkpoint(p, info);
  DetectorCheckpointInfo back_info;
  auto q = detector_from_checkpoint(decode_checkpoint(encode_checkpoint(c)), &back_info);
  EXPECT_EQ(param_bytes(q), param_bytes(p));
  EXPECT_EQ(back_info.step, 123);
  EXPECT_EQ(back_info.scene_seed, 4u);
  EXPECT_EQ(back_info.config.block.resolved_hidden(), 48);

  Checkpoint bad = c;
  for (auto& [k, v] : bad.config)
    if (k == "width2") v = "16";
  EXPECT_THROW(detector_from_checkpoint(bad), FormatError);
  bad = c;
  bad.entries.pop_back();
  EXPECT_THROW(detector_from_checkpoint(bad), FormatError);
  bad = c;
  bad.entries.push_back({"extra", to_raw(Tensor4f())});
  EXPECT_THROW(detector_from_checkpoint(bad), FormatError);
}

TEST(Training, ZeroLearningRateLeavesParamsUnchanged) {
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.steps = 15;
  cfg.val_size = 0;
  cfg.patience = 0;
  auto p = init_detector<float>(DetectorConfig{}, 1);
  auto r = train(cfg, SceneConfig{}, p);
  EXPECT_EQ(r.steps_run, 15);
  EXPECT_EQ(param_bytes(r.params), param_bytes(p));
}

TEST(Training, DeterministicLossHistory) {
  TrainConfig cfg;
  cfg.steps = 25;
  cfg.eval_every = 10;
  cfg.val_size = 8;
  auto p = init_detector<float>(DetectorConfig{}, 2);
  auto a = train(cfg, SceneConfig{}, p);
  auto b = train(cfg, SceneConfig{}, p);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(a.val_history, b.val_history);
  EXPECT_EQ(param_bytes(a.params), param_bytes(b.params));
}

TEST(Training, TrivialSceneLossFalls) {
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.val_size = 0;
  cfg.patience = 0;
  SceneConfig s = centred_disc(12, 24, 0.05, 1);
  DetectorConfig dc;
  dc.classes = 1;
  auto r = train(cfg, s, init_detector<float>(dc, 3));
  ASSERT_EQ(r.loss_history.size(), 200u);
  EXPECT_LT(window_mean(r.loss_history, 190, 10), window_mean(r.loss_history, 0, 10));
  EXPECT_LT(window_mean(r.loss_history, 100, 10), window_mean(r.loss_history, 0, 10));
}

TEST(Training, OverfitsEightImages) {
  TrainConfig cfg;
  cfg.steps = 2000;
  cfg.train_set_size = 8;
  cfg.val_size = 0;
  cfg.patience = 0;
  struct Reached {};
  double initial = -1;
  Index reached_at = -1;
  try {
    train(cfg, SceneConfig{}, init_detector<float>(DetectorConfig{}, 4), [&](Index step, double loss) {
      if (initial < 0) initial = loss;
      if (loss < 0.1 * initial) {
        reached_at = step;
        throw Reached{};
      }
    });
  } catch (const Reached&) {
  }
  EXPECT_GE(reached_at, 0) << "loss never fell below 10% of " << initial;
}

TEST(Training, EarlyStoppingReturnsBestSnapshot) {
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.lr = 0.05;
  cfg.eval_every = 10;
  cfg.patience = 2;
  cfg.val_size = 16;
  cfg.train_set_size = 2;  // memorise two images so validation loss turns up
  DetectorConfig dc;
  dc.caf_blocks = 0;
  auto r = train(cfg, SceneConfig{}, init_detector<float>(dc, 5));
  ASSERT_FALSE(r.val_history.empty());
  double best = r.val_history.front().second;
  Index best_step = r.val_history.front().first;
  for (auto [s, v] : r.val_history)
    if (v < best) best = v, best_step = s;
  EXPECT_EQ(r.best_step, best_step);
  if (r.early_stopped) EXPECT_LT(r.steps_run, 400);
}

TEST(Training, RejectsInvalidConfig) {
  TrainConfig cfg;
  cfg.batch = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.lr = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
