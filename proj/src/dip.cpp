#include "coedg/dip.hpp"

#include <algorithm>
#include <cmath>

#include "coedg/error.hpp"

namespace coedg {

std::size_t DipInput::abnormality_count() const {
  return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const DipSlot& s) {
    return s.kind == SlotKind::kAbnormality;
  }));
}

namespace {

int percent(double v, double extent) {
  // v * 100 / extent keeps integer-valued products exact before the division.
  return std::clamp(static_cast<int>(std::floor(v * 100.0 / extent)), 0, 100);
}

}  // namespace

LocationEmbedding quantize_location(const BBox& box, double width, double height) {
  if (!(width > 0 && height > 0)) {
    throw Error(ErrorKind::kInvalidArgument, "image dimensions must be positive");
  }
  if (!(box.x0 >= 0 && box.y0 >= 0 && box.x1 <= width && box.y1 <= height &&
        box.x0 <= box.x1 && box.y0 <= box.y1)) {
    throw Error(ErrorKind::kInvalidArgument, "box out of image");
  }
  return {percent(box.x0, width), percent(box.y0, height), percent(box.x1, width),
          percent(box.y1, height)};
}

DipInput build_dip_input(std::string sample_id, double width, double height,
                         std::span<const Detection> detections, DipSource source,
                         int max_slots) {
  if (max_slots < 1) throw Error(ErrorKind::kConfig, "max_slots must be >= 1");

  std::vector<Detection> ranked(detections.begin(), detections.end());
  if (source == DipSource::kGroundTruth) {
    for (auto& d : ranked) d.score = 1.0;
  } else {
    std::stable_sort(ranked.begin(), ranked.end(), ranks_before);
  }
  if (ranked.size() > static_cast<std::size_t>(max_slots)) ranked.resize(max_slots);

  DipInput out;
  out.sample_id = std::move(sample_id);
  out.width = width;
  out.height = height;
  out.slots.reserve(max_slots);
  for (const auto& d : ranked) {
    DipSlot slot;
    slot.kind = SlotKind::kAbnormality;
    slot.crop = d.box;
    slot.location = quantize_location(d.box, width, height);
    slot.category = d.category;
    out.slots.push_back(slot);
  }
  out.slots.resize(max_slots, DipSlot::null_slot());
  return out;
}

ClassificationTarget classification_targets(std::string sample_id,
                                            std::span<const Detection> detections,
                                            int num_categories) {
  ClassificationTarget out{std::move(sample_id), std::vector<int>(num_categories, 0)};
  for (const auto& d : detections) {
    if (d.category == kBackground) continue;
    if (d.category < 0 || d.category > num_categories) {
      throw Error(ErrorKind::kInvalidArgument,
                  "category " + std::to_string(d.category) + " outside the category table");
    }
    out.multi_hot[d.category - 1] = 1;
  }
  return out;
}

}  // namespace coedg
