#include "caf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace caf {

bool DetBox::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 >= x1 && y2 >= y1 &&
         score >= 0.0 && score <= 1.0;
}

double iou(const DetBox& a, const DetBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

std::vector<std::size_t> score_order(std::span<const DetBox> boxes) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  return order;
}

}  // namespace

std::vector<std::size_t> nms_indices(std::span<const DetBox> boxes, double iou_thresh) {
  std::vector<std::size_t> kept;
  for (std::size_t i : score_order(boxes)) {
    const bool clear = std::all_of(kept.begin(), kept.end(),
                                   [&](std::size_t k) { return iou(boxes[i], boxes[k]) <= iou_thresh; });
    if (clear) kept.push_back(i);
  }
  return kept;
}

std::vector<DetBox> nms(std::span<const DetBox> boxes, double iou_thresh) {
  std::vector<DetBox> out;
  for (std::size_t i : nms_indices(boxes, iou_thresh)) out.push_back(boxes[i]);
  return out;
}

std::vector<DetBox> nms_per_class(std::span<const DetBox> boxes, double iou_thresh) {
  std::map<int, std::vector<DetBox>> by_class;
  for (const DetBox& b : boxes) by_class[b.class_id].push_back(b);
  std::vector<DetBox> out;
  for (const auto& [cls, group] : by_class) {
    std::vector<DetBox> kept = nms(group, iou_thresh);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const DetBox& a, const DetBox& b) { return a.score > b.score; });
  return out;
}

std::vector<bool> match_detections(std::span<const DetBox> dets, std::span<const DetBox> gts, double iou_thresh) {
  std::vector<bool> labels(dets.size(), false);
  std::vector<bool> matched(gts.size(), false);
  for (std::size_t d : score_order(dets)) {
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (matched[g]) continue;
      const double o = iou(dets[d], gts[g]);
      if (o > best) {
        best = o;
        best_gt = g;
      }
    }
    if (best_gt < gts.size() && best >= iou_thresh) {
      matched[best_gt] = true;
      labels[d] = true;
    }
  }
  return labels;
}

std::optional<double> average_precision(std::span<const RankedLabel> ranked, std::size_t gt_count) {
  if (gt_count == 0) {
    if (ranked.empty()) return std::nullopt;
    return 0.0;
  }
  std::vector<std::size_t> order(ranked.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return ranked[a].score > ranked[b].score; });

  const std::size_t n = ranked.size();
  std::vector<double> precision(n);
  std::vector<double> recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ranked[order[i]].true_positive) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(gt_count);
  }
  // Monotone envelope: precision at recall r is the best precision at any recall >= r.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

const std::array<double, 10>& coco_iou_thresholds() {
  static const std::array<double, 10> t = [] {
    std::array<double, 10> a{};
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.50 + 0.05 * static_cast<double>(i);
    return a;
  }();
  return t;
}

namespace {

std::vector<DetBox> of_class(const std::vector<DetBox>& boxes, int cls) {
  std::vector<DetBox> out;
  std::copy_if(boxes.begin(), boxes.end(), std::back_inserter(out), [&](const DetBox& b) { return b.class_id == cls; });
  return out;
}

}  // namespace

EvalReport evaluate(const std::vector<std::vector<DetBox>>& dets, const std::vector<std::vector<DetBox>>& gts,
                    std::span<const int> class_ids) {
  if (class_ids.empty()) throw std::invalid_argument("evaluate: empty class set");
  if (dets.size() != gts.size()) {
    throw std::invalid_argument("evaluate: " + std::to_string(dets.size()) + " detection images vs " +
                                std::to_string(gts.size()) + " ground-truth images");
  }
  const auto known = [&](int cls) { return std::find(class_ids.begin(), class_ids.end(), cls) != class_ids.end(); };
  for (const auto* set : {&dets, &gts}) {
    for (const auto& image : *set) {
      for (const DetBox& b : image) {
        if (!known(b.class_id)) throw std::invalid_argument("evaluate: unknown class id " + std::to_string(b.class_id));
        if (!b.valid()) throw std::invalid_argument("evaluate: invalid box");
      }
    }
  }

  EvalReport report;
  const auto& thresholds = coco_iou_thresholds();
  for (int cls : class_ids) {
    std::vector<std::vector<DetBox>> cls_dets;
    std::vector<std::vector<DetBox>> cls_gts;
    std::size_t gt_count = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      cls_dets.push_back(of_class(dets[i], cls));
      cls_gts.push_back(of_class(gts[i], cls));
      gt_count += cls_gts.back().size();
    }

    // Operating point counts include classes without ground truth (their detections are FPs).
    for (std::size_t i = 0; i < dets.size(); ++i) {
      std::vector<DetBox> confident;
      std::copy_if(cls_dets[i].begin(), cls_dets[i].end(), std::back_inserter(confident),
                   [](const DetBox& b) { return b.score >= kOperatingScore; });
      const std::vector<bool> labels = match_detections(confident, cls_gts[i], kOperatingIou);
      const auto tp = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
      report.tp += tp;
      report.fp += labels.size() - tp;
      report.fn += cls_gts[i].size() - tp;
    }

    if (gt_count == 0) continue;
    ClassAp entry{cls, gt_count, {}};
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      std::vector<RankedLabel> ranked;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        const std::vector<bool> labels = match_detections(cls_dets[i], cls_gts[i], thresholds[t]);
        for (std::size_t d = 0; d < labels.size(); ++d) ranked.push_back({cls_dets[i][d].score, labels[d]});
      }
      entry.ap[t] = *average_precision(ranked, gt_count);
    }
    report.classes.push_back(entry);
  }

  if (!report.classes.empty()) {
    const auto k = static_cast<double>(report.classes.size());
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      double s = 0.0;
      for (const ClassAp& c : report.classes) s += c.ap[t];
      report.map_per_threshold[t] = s / k;
    }
    report.map50 = report.map_per_threshold[0];
    report.map50_95 = std::accumulate(report.map_per_threshold.begin(), report.map_per_threshold.end(), 0.0) /
                      static_cast<double>(thresholds.size());
  }
  const std::size_t predicted = report.tp + report.fp;
  const std::size_t actual = report.tp + report.fn;
  report.precision = predicted > 0 ? static_cast<double>(report.tp) / static_cast<double>(predicted) : 0.0;
  report.recall = actual > 0 ? static_cast<double>(report.tp) / static_cast<double>(actual) : 0.0;
  return report;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << "# precision/recall measured at score >= " << kOperatingScore << ", IoU " << kOperatingIou << '\n';
  os << std::fixed << std::setprecision(4);
  os << "class  gts     AP@50   AP@50-95\n";
  for (const ClassAp& c : r.classes) {
    double mean = 0.0;
    for (double a : c.ap) mean += a;
    mean /= static_cast<double>(c.ap.size());
    os << std::setw(5) << c.class_id << "  " << std::setw(5) << c.gt_count << "  " << std::setw(7) << c.ap[0] << "  "
       << std::setw(8) << mean << '\n';
  }
  os << "mAP@50 " << r.map50 << " | mAP@50-95 " << r.map50_95 << " | Recall " << r.recall << " | Precision "
     << r.precision << '\n';
  os << std::setprecision(17) << std::defaultfloat;
  os << "map50=" << r.map50 << '\n'
     << "map50_95=" << r.map50_95 << '\n'
     << "recall=" << r.recall << '\n'
     << "precision=" << r.precision << '\n'
     << "tp=" << r.tp << '\n'
     << "fp=" << r.fp << '\n'
     << "fn=" << r.fn << '\n'
     << "classes_evaluated=" << r.classes.size() << '\n';
  for (const ClassAp& c : r.classes) os << "ap50.class" << c.class_id << '=' << c.ap[0] << '\n';
  return os.str();
}

}  // namespace caf
