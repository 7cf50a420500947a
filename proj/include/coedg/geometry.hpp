#pragma once

#include <span>
#include <string_view>
#include <vector>

namespace coedg {

using CategoryId = int;
inline constexpr CategoryId kBackground = 0;

// Axis-aligned box in image pixels, origin top-left.
struct BBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid() const;

  friend bool operator==(const BBox&, const BBox&) = default;
};

enum class Source { kTeacher, kStudent, kGroundTruth, kMerged };

std::string_view to_string(Source s);
Source source_from_string(std::string_view s);

struct Detection {
  CategoryId category = kBackground;
  BBox box;
  double score = 0.0;
  Source source = Source::kStudent;
  // Set by sa_nms on every survivor of the merged set.
  bool merged = false;

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Intersection over union with exact area arithmetic.
/// Throws Error(kInvalidArgument, "degenerate box") for zero-area or
/// otherwise invalid boxes.
double iou(const BBox& a, const BBox& b);

/// Strict weak order used everywhere detections are ranked: descending score,
/// ties broken by category, then x0, then y0 (ascending).
bool ranks_before(const Detection& a, const Detection& b);

/// Class-aware greedy NMS. A detection survives iff its IoU with every
/// already-kept detection of the same category is <= iou_thr.
/// Output is in rank order.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thr);

/// Self-adaptive NMS: nms over the union of teacher pseudo labels and student
/// predictions. Survivors keep their source tag and get merged = true.
std::vector<Detection> sa_nms(std::span<const Detection> teacher,
                              std::span<const Detection> student,
                              double iou_thr);

}  // namespace coedg
