#pragma once

#include <set>
#include <span>
#include <string>
#include <vector>

#include "coedg/geometry.hpp"

namespace coedg {

// Image-level abnormality categories predicted by the report generator's
// class token. Background is never a member.
struct GeneratorCategorySet {
  std::string sample_id;
  std::set<CategoryId> categories;

  bool contains(CategoryId c) const { return categories.count(c) != 0; }
};

/// Builds the category set from per-category probabilities. probs[i] is the
/// probability of category i + 1 (background has no entry).
GeneratorCategorySet categories_from_probs(std::string sample_id,
                                           std::span<const double> probs,
                                           double threshold = 0.5);

struct StageCounts {
  int raw_teacher = 0;
  int raw_student = 0;
  int after_threshold = 0;
  int after_sa_nms = 0;
  int after_gip = 0;
};

struct PseudoLabelSet {
  std::string sample_id;
  std::vector<Detection> labels;
  bool include_in_unsup_loss = false;
  StageCounts provenance;
};

struct PseudoLabelConfig {
  double tau = 0.9;
  double iou_thr = 0.5;
};

/// Keeps detections with score > tau, preserving order.
std::vector<Detection> threshold_filter(std::span<const Detection> dets, double tau);

/// Keeps detections whose category the generator predicted.
std::vector<Detection> gip_filter(std::span<const Detection> pseudo,
                                  const GeneratorCategorySet& gen_cats);

/// False iff neither detector found anything, or the generator predicted no
/// abnormality. Excluded samples still feed generator training.
bool loss_inclusion(std::span<const Detection> teacher, std::span<const Detection> student,
                    const GeneratorCategorySet& gen_cats);

/// Empty detection lists become a single whole-image background detection
/// with sentinel score 1.0.
std::vector<Detection> normal_case_detection(std::span<const Detection> dets, double width,
                                             double height);

/// threshold -> SA-NMS -> generator-guided filter, with per-stage counts.
PseudoLabelSet assemble_pseudo_labels(std::string sample_id, std::span<const Detection> teacher,
                                      std::span<const Detection> student,
                                      const GeneratorCategorySet& gen_cats,
                                      const PseudoLabelConfig& config);

/// Fraction of detections whose category is in `present`; 1.0 for an empty list.
double category_precision(std::span<const Detection> dets, const std::set<CategoryId>& present);

}  // namespace coedg
