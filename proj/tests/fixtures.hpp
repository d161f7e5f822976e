#pragma once

#include "caf/metrics.hpp"

#include <random>
#include <utility>
#include <vector>

namespace fixtures {

struct EvalFixture {
  std::vector<std::vector<caf::DetBox>> dets;
  std::vector<std::vector<caf::DetBox>> gts;
  std::vector<int> classes;
};

/// 3 images, 2 classes: duplicates, a miss, a localisation error and a stray FP.
inline EvalFixture hand_built() {
  using B = caf::DetBox;
  EvalFixture f;
  f.classes = {0, 1};
  f.gts = {
      {B{0, 0, 10, 10, 0, 1}, B{20, 20, 30, 30, 1, 1}},
      {B{5, 5, 15, 15, 0, 1}, B{40, 40, 52, 50, 0, 1}},
      {B{10, 30, 18, 38, 1, 1}},
  };
  f.dets = {
      {B{0, 0, 10, 11, 0, 0.9}, B{1, 1, 10, 10, 0, 0.6}, B{21, 21, 31, 31, 1, 0.8}, B{50, 50, 55, 55, 1, 0.3}},
      {B{6, 5, 15, 16, 0, 0.7}, B{40, 41, 50, 50, 0, 0.55}, B{0, 0, 3, 3, 0, 0.95}},
      {B{10, 31, 18, 39, 1, 0.4}, B{11, 30, 19, 37, 1, 0.85}},
  };
  return f;
}

inline caf::DetBox random_box(std::mt19937_64& rng, double extent, int classes) {
  std::uniform_real_distribution<double> pos(0, extent), size(2, extent / 3), sc(0, 1);
  const double x = pos(rng), y = pos(rng);
  return caf::DetBox{x, y, x + size(rng), y + size(rng), static_cast<int>(rng() % static_cast<unsigned>(classes)), sc(rng)};
}

// Jittered copies of ground truth plus clutter: a mix of TPs at various IoUs and FPs.
inline std::vector<std::vector<caf::DetBox>> noisy_dets(const std::vector<std::vector<caf::DetBox>>& gts, std::mt19937_64& rng,
                                            int classes) {
  std::normal_distribution<double> jitter(0, 1.5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<caf::DetBox>> dets(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const caf::DetBox& g : gts[i]) {
      const int copies = static_cast<int>(rng() % 3);
      for (int k = 0; k < copies; ++k) {
        caf::DetBox d = g;
        d.x1 += jitter(rng), d.y1 += jitter(rng), d.x2 += jitter(rng), d.y2 += jitter(rng);
        if (d.x2 < d.x1) std::swap(d.x1, d.x2);
        if (d.y2 < d.y1) std::swap(d.y1, d.y2);
        d.score = u(rng);
        dets[i].push_back(d);
      }
    }
    const int clutter = static_cast<int>(rng() % 3);
    for (int k = 0; k < clutter; ++k) dets[i].push_back(random_box(rng, 60, classes));
  }
  return dets;
}

inline std::vector<std::vector<caf::DetBox>> random_gts(std::mt19937_64& rng, std::size_t images, int classes) {
  std::vector<std::vector<caf::DetBox>> gts(images);
  for (auto& img : gts) {
    const int k = static_cast<int>(rng() % 5);
    for (int j = 0; j < k; ++j) {
      caf::DetBox b = random_box(rng, 60, classes);
      b.score = 1.0;
      img.push_back(b);
    }
  }
  return gts;
}

}  // namespace fixtures
