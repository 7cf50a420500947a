#include "coedg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "coedg/error.hpp"

namespace coedg {

bool BBox::valid() const {
  return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) &&
         std::isfinite(y1) && x0 >= 0 && y0 >= 0 && x0 < x1 && y0 < y1;
}

std::string_view to_string(Source s) {
  switch (s) {
    case Source::kTeacher: return "teacher";
    case Source::kStudent: return "student";
    case Source::kGroundTruth: return "ground-truth";
    case Source::kMerged: return "merged";
  }
  return "student";
}

Source source_from_string(std::string_view s) {
  if (s == "teacher") return Source::kTeacher;
  if (s == "student") return Source::kStudent;
  if (s == "ground-truth") return Source::kGroundTruth;
  if (s == "merged") return Source::kMerged;
  throw Error(ErrorKind::kParse, "unknown detection source '" + std::string(s) + "'");
}

double iou(const BBox& a, const BBox& b) {
  if (!a.valid() || !b.valid()) throw Error(ErrorKind::kInvalidArgument, "degenerate box");
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

bool ranks_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.category != b.category) return a.category < b.category;
  if (a.box.x0 != b.box.x0) return a.box.x0 < b.box.x0;
  return a.box.y0 < b.box.y0;
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thr) {
  std::vector<Detection> order(dets.begin(), dets.end());
  std::stable_sort(order.begin(), order.end(), ranks_before);

  std::vector<Detection> kept;
  kept.reserve(order.size());
  for (const auto& d : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.category == d.category && iou(k.box, d.box) > iou_thr;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> sa_nms(std::span<const Detection> teacher,
                              std::span<const Detection> student, double iou_thr) {
  std::vector<Detection> pool;
  pool.reserve(teacher.size() + student.size());
  pool.insert(pool.end(), teacher.begin(), teacher.end());
  pool.insert(pool.end(), student.begin(), student.end());
  auto out = nms(pool, iou_thr);
  for (auto& d : out) d.merged = true;
  return out;
}

}  // namespace coedg
