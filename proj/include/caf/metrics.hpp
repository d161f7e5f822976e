#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace caf {

/// Axis-aligned box in pixel coordinates. Ground truth carries score 1.
struct DetBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  int class_id = 0;
  double score = 1.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const;  // ordered corners, finite, score in [0, 1]

  friend bool operator==(const DetBox&, const DetBox&) = default;
};

/// Intersection over union; 0 when the union is empty.
double iou(const DetBox& a, const DetBox& b);

/// Greedy NMS over one class. Boxes are visited by descending score (ties by lower
/// index); a box is kept iff its IoU with every kept box is <= iou_thresh.
/// Returns indices of kept boxes in visit order.
std::vector<std::size_t> nms_indices(std::span<const DetBox> boxes, double iou_thresh);
std::vector<DetBox> nms(std::span<const DetBox> boxes, double iou_thresh);
/// Runs nms independently for every class id present.
std::vector<DetBox> nms_per_class(std::span<const DetBox> boxes, double iou_thresh);

/// Single class, single image. Labels are returned in input order; true = TP.
std::vector<bool> match_detections(std::span<const DetBox> dets, std::span<const DetBox> gts, double iou_thresh);

struct RankedLabel {
  double score = 0.0;
  bool true_positive = false;
};

/// All-point interpolated area under the precision/recall curve. Entries are ranked
/// by descending score, ties in input order. With gt_count == 0 the result is 0 if
/// any detection exists and std::nullopt (not applicable) otherwise.
std::optional<double> average_precision(std::span<const RankedLabel> ranked, std::size_t gt_count);

/// 0.50, 0.55, ..., 0.95
const std::array<double, 10>& coco_iou_thresholds();

inline constexpr double kOperatingScore = 0.5;
inline constexpr double kOperatingIou = 0.5;

struct ClassAp {
  int class_id = 0;
  std::size_t gt_count = 0;
  std::array<double, 10> ap{};  // per IoU threshold
};

struct EvalReport {
  std::vector<ClassAp> classes;  // classes with at least one ground truth
  std::array<double, 10> map_per_threshold{};
  double map50 = 0.0;
  double map50_95 = 0.0;
  double precision = 0.0;  // at score >= 0.5, IoU 0.5
  double recall = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

/// dets[i] and gts[i] belong to image i. Every box must carry one of `class_ids`.
/// Throws std::invalid_argument on an empty class set or inconsistent input.
EvalReport evaluate(const std::vector<std::vector<DetBox>>& dets, const std::vector<std::vector<DetBox>>& gts,
                    std::span<const int> class_ids);

/// Human-readable table followed by key=value lines.
std::string format_report(const EvalReport& report);

}  // namespace caf
