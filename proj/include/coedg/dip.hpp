#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coedg/geometry.hpp"

namespace coedg {

// Box corners as floor-quantized percentages of the image size.
struct LocationEmbedding {
  int q0 = 0, q1 = 0, q2 = 0, q3 = 0;
  friend bool operator==(const LocationEmbedding&, const LocationEmbedding&) = default;
};

enum class SlotKind { kAbnormality, kNull };

struct DipSlot {
  SlotKind kind = SlotKind::kNull;
  // Region the generator adapter crops and embeds. Present iff kAbnormality.
  std::optional<BBox> crop;
  std::optional<LocationEmbedding> location;
  std::optional<CategoryId> category;

  static DipSlot null_slot() { return {}; }
  friend bool operator==(const DipSlot&, const DipSlot&) = default;
};

// Generator input: a class-token slot followed by exactly L box slots.
struct DipInput {
  std::string sample_id;
  bool has_class_token = true;
  double width = 0, height = 0;
  std::vector<DipSlot> slots;

  std::size_t abnormality_count() const;
  friend bool operator==(const DipInput&, const DipInput&) = default;
};

enum class DipSource { kGroundTruth, kStudentFiltered };

// multi_hot[i] refers to category i + 1.
struct ClassificationTarget {
  std::string sample_id;
  std::vector<int> multi_hot;
  friend bool operator==(const ClassificationTarget&, const ClassificationTarget&) = default;
};

inline constexpr int kDefaultMaxSlots = 5;

/// floor((x0/W, y0/H, x1/W, y1/H) * 100). Throws "box out of image" when the
/// box leaves [0, width] x [0, height].
LocationEmbedding quantize_location(const BBox& box, double width, double height);

/// One slot per detection, best first, truncated to max_slots and padded with
/// null slots. Ground truth keeps annotation order; student detections are
/// ranked by score.
DipInput build_dip_input(std::string sample_id, double width, double height,
                         std::span<const Detection> detections, DipSource source,
                         int max_slots = kDefaultMaxSlots);

ClassificationTarget classification_targets(std::string sample_id,
                                            std::span<const Detection> detections,
                                            int num_categories);

}  // namespace coedg
