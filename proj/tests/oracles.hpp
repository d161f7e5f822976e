#pragma once

// Direct-loop reference implementations used only by tests. They share no code with
// the library beyond the Tensor4 container and the DetBox struct.

#include "caf/metrics.hpp"
#include "caf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <vector>

namespace oracle {

using caf::DetBox;
using caf::Index;
using caf::Tensor4;

template <typename S>
Tensor4<S> conv2d(const Tensor4<S>& x, const Tensor4<S>& w, const Tensor4<S>* b, Index sy, Index sx, Index py,
                  Index px, Index dy, Index dx, Index groups) {
  const Index oc = w.n();
  const Index icg = w.c();
  const Index kh = w.h();
  const Index kw = w.w();
  const Index oh = (x.h() + 2 * py - dy * (kh - 1) - 1) / sy + 1;
  const Index ow = (x.w() + 2 * px - dx * (kw - 1) - 1) / sx + 1;
  const Index ocg = oc / groups;
  Tensor4<S> y({x.n(), oc, oh, ow});
  for (Index n = 0; n < x.n(); ++n)
    for (Index o = 0; o < oc; ++o)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          long double acc = b ? (*b)(0, o, 0, 0) : 0;
          const Index g = o / ocg;
          for (Index c = 0; c < icg; ++c)
            for (Index u = 0; u < kh; ++u)
              for (Index v = 0; v < kw; ++v) {
                const Index yy = i * sy - py + u * dy;
                const Index xx = j * sx - px + v * dx;
                if (yy < 0 || yy >= x.h() || xx < 0 || xx >= x.w()) continue;
                acc += static_cast<long double>(x(n, g * icg + c, yy, xx)) * w(o, c, u, v);
              }
          y(n, o, i, j) = static_cast<S>(acc);
        }
  return y;
}

/// Rank-5 cross-correlation over input (n, c, 1, h, w) with kernel (out, in/g, 3, 3, 3)
/// given as a flat row-major array, depth padding pd and spatial padding (py, px).
template <typename S>
Tensor4<S> conv3d(const Tensor4<S>& x, const std::vector<S>& k5, Index out, const Tensor4<S>* b, Index pd, Index py,
                  Index px, Index groups) {
  const Index in_g = x.c() / groups;
  const Index out_g = out / groups;
  const Index depth_in = 1;
  const Index depth_out = depth_in + 2 * pd - 3 + 1;
  auto K = [&](Index o, Index c, Index a, Index u, Index v) {
    return k5[static_cast<std::size_t>((((o * in_g + c) * 3 + a) * 3 + u) * 3 + v)];
  };
  std::vector<Tensor4<S>> slices;
  for (Index od = 0; od < depth_out; ++od) {
    Tensor4<S> y({x.n(), out, x.h() + 2 * py - 2, x.w() + 2 * px - 2});
    for (Index n = 0; n < x.n(); ++n)
      for (Index o = 0; o < out; ++o)
        for (Index i = 0; i < y.h(); ++i)
          for (Index j = 0; j < y.w(); ++j) {
            long double acc = b ? (*b)(0, o, 0, 0) : 0;
            const Index g = o / out_g;
            for (Index c = 0; c < in_g; ++c)
              for (Index a = 0; a < 3; ++a)
                for (Index u = 0; u < 3; ++u)
                  for (Index v = 0; v < 3; ++v) {
                    const Index d = od - pd + a;
                    const Index yy = i - py + u;
                    const Index xx = j - px + v;
                    if (d < 0 || d >= depth_in || yy < 0 || yy >= x.h() || xx < 0 || xx >= x.w()) continue;
                    acc += static_cast<long double>(x(n, g * in_g + c, yy, xx)) * K(o, c, a, u, v);
                  }
            y(n, o, i, j) = static_cast<S>(acc);
          }
    slices.push_back(std::move(y));
  }
  return slices.front();
}

template <typename S>
Tensor4<S> layer_norm(const Tensor4<S>& x, const Tensor4<S>& gamma, const Tensor4<S>& beta, double eps) {
  Tensor4<S> y(x.shape());
  for (Index n = 0; n < x.n(); ++n)
    for (Index i = 0; i < x.h(); ++i)
      for (Index j = 0; j < x.w(); ++j) {
        long double mean = 0;
        for (Index c = 0; c < x.c(); ++c) mean += x(n, c, i, j);
        mean /= x.c();
        long double var = 0;
        for (Index c = 0; c < x.c(); ++c) var += (x(n, c, i, j) - mean) * (x(n, c, i, j) - mean);
        var /= x.c();
        for (Index c = 0; c < x.c(); ++c) {
          y(n, c, i, j) = static_cast<S>((x(n, c, i, j) - mean) / std::sqrt(var + eps) * gamma(0, c, 0, 0) +
                                         beta(0, c, 0, 0));
        }
      }
  return y;
}

/// View channels as a (g, c/g) grid, transpose it and read it back row-major.
template <typename S>
Tensor4<S> channel_shuffle(const Tensor4<S>& x, Index g) {
  const Index per = x.c() / g;
  std::vector<Index> grid_t;  // transposed grid, flattened
  for (Index j = 0; j < per; ++j)
    for (Index gi = 0; gi < g; ++gi) grid_t.push_back(gi * per + j);
  Tensor4<S> y(x.shape());
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c)
      for (Index i = 0; i < x.h(); ++i)
        for (Index j = 0; j < x.w(); ++j) y(n, c, i, j) = x(n, grid_t[static_cast<std::size_t>(c)], i, j);
  return y;
}

inline double iou(const DetBox& a, const DetBox& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (ix > 0 && iy > 0) ? ix * iy : 0.0;
  const double u = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return u <= 0 ? 0.0 : inter / u;
}

/// Counts unit cells of the integer grid covered by both / either box.
inline double iou_grid(int ax1, int ay1, int ax2, int ay2, int bx1, int by1, int bx2, int by2) {
  int both = 0;
  int either = 0;
  for (int y = std::min(ay1, by1); y < std::max(ay2, by2); ++y)
    for (int x = std::min(ax1, bx1); x < std::max(ax2, bx2); ++x) {
      const bool in_a = x >= ax1 && x < ax2 && y >= ay1 && y < ay2;
      const bool in_b = x >= bx1 && x < bx2 && y >= by1 && y < by2;
      both += in_a && in_b;
      either += in_a || in_b;
    }
  return either ? static_cast<double>(both) / either : 0.0;
}

/// Repeatedly takes the best remaining box (lowest index on ties) and discards
/// everything that overlaps it by more than the threshold.
inline std::vector<std::size_t> nms(const std::vector<DetBox>& boxes, double thresh) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<std::size_t> kept;
  while (true) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && (!best || boxes[i].score > boxes[*best].score)) best = i;
    }
    if (!best) break;
    kept.push_back(*best);
    alive[*best] = false;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && oracle::iou(boxes[i], boxes[*best]) > thresh) alive[i] = false;
    }
  }
  return kept;
}

/// Detections by descending score (input order on ties); each takes its best-IoU
/// still-free gt (first on ties) when that IoU reaches the threshold.
inline std::vector<bool> match(const std::vector<DetBox>& dets, const std::vector<DetBox>& gts, double thresh) {
  std::vector<std::size_t> order;
  std::vector<bool> used(dets.size(), false);
  for (std::size_t k = 0; k < dets.size(); ++k) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (!used[i] && (!best || dets[i].score > dets[*best].score)) best = i;
    }
    used[*best] = true;
    order.push_back(*best);
  }
  std::vector<bool> taken(gts.size(), false);
  std::vector<bool> tp(dets.size(), false);
  for (std::size_t d : order) {
    double best_iou = -1;
    std::optional<std::size_t> best_gt;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double o = oracle::iou(dets[d], gts[g]);
      if (o > best_iou) best_iou = o, best_gt = g;
    }
    if (best_gt && best_iou >= thresh) taken[*best_gt] = true, tp[d] = true;
  }
  return tp;
}

/// Area under the interpolated PR curve by sweeping every cut-off of the ranking:
/// for each distinct recall level, take the best precision at that recall or beyond.
inline double ap(std::vector<std::pair<double, bool>> ranked, std::size_t gts) {
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> rec;
  std::vector<double> prec;
  for (std::size_t k = 1; k <= ranked.size(); ++k) {
    std::size_t tp = 0;
    for (std::size_t i = 0; i < k; ++i) tp += ranked[i].second;
    rec.push_back(static_cast<double>(tp) / static_cast<double>(gts));
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k));
  }
  std::vector<double> levels = rec;
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  double area = 0;
  double prev = 0;
  for (double r : levels) {
    double best = 0;
    for (std::size_t k = 0; k < rec.size(); ++k) {
      if (rec[k] >= r) best = std::max(best, prec[k]);
    }
    area += (r - prev) * best;
    prev = r;
  }
  return area;
}

struct Eval {
  double map50 = 0;
  double map50_95 = 0;
  double precision = 0;
  double recall = 0;
  std::map<int, std::vector<double>> ap;  // class -> AP per threshold
};

inline Eval evaluate(const std::vector<std::vector<DetBox>>& dets, const std::vector<std::vector<DetBox>>& gts,
                     const std::vector<int>& classes) {
  Eval e;
  std::size_t tp = 0, fp = 0, fn = 0;
  for (int c : classes) {
    std::size_t count = 0;
    for (const auto& img : gts)
      for (const DetBox& g : img) count += g.class_id == c;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      std::vector<DetBox> d, g;
      for (const DetBox& b : dets[i])
        if (b.class_id == c && b.score >= 0.5) d.push_back(b);
      for (const DetBox& b : gts[i])
        if (b.class_id == c) g.push_back(b);
      const auto labels = match(d, g, 0.5);
      const auto t = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
      tp += t;
      fp += labels.size() - t;
      fn += g.size() - t;
    }
    if (count == 0) continue;
    for (int k = 0; k < 10; ++k) {
      const double thr = 0.5 + 0.05 * k;
      std::vector<std::pair<double, bool>> ranked;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        std::vector<DetBox> d, g;
        for (const DetBox& b : dets[i])
          if (b.class_id == c) d.push_back(b);
        for (const DetBox& b : gts[i])
          if (b.class_id == c) g.push_back(b);
        const auto labels = match(d, g, thr);
        for (std::size_t j = 0; j < d.size(); ++j) ranked.emplace_back(d[j].score, labels[j]);
      }
      e.ap[c].push_back(ap(ranked, count));
    }
  }
  if (!e.ap.empty()) {
    for (const auto& [c, v] : e.ap) {
      e.map50 += v[0];
      for (double a : v) e.map50_95 += a / 10.0;
    }
    e.map50 /= static_cast<double>(e.ap.size());
    e.map50_95 /= static_cast<double>(e.ap.size());
  }
  e.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  e.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  return e;
}

}  // namespace oracle
