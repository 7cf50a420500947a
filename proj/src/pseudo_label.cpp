#include "coedg/pseudo_label.hpp"

#include <algorithm>

#include "coedg/error.hpp"

namespace coedg {

GeneratorCategorySet categories_from_probs(std::string sample_id, std::span<const double> probs,
                                           double threshold) {
  GeneratorCategorySet out{std::move(sample_id), {}};
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > threshold) out.categories.insert(static_cast<CategoryId>(i + 1));
  }
  return out;
}

std::vector<Detection> threshold_filter(std::span<const Detection> dets, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "tau must be in (0, 1]");
  }
  std::vector<Detection> out;
  std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
               [tau](const Detection& d) { return d.score > tau; });
  return out;
}

std::vector<Detection> gip_filter(std::span<const Detection> pseudo,
                                  const GeneratorCategorySet& gen_cats) {
  std::vector<Detection> out;
  std::copy_if(pseudo.begin(), pseudo.end(), std::back_inserter(out),
               [&](const Detection& d) { return gen_cats.contains(d.category); });
  return out;
}

bool loss_inclusion(std::span<const Detection> teacher, std::span<const Detection> student,
                    const GeneratorCategorySet& gen_cats) {
  if (teacher.empty() && student.empty()) return false;
  return !gen_cats.categories.empty();
}

std::vector<Detection> normal_case_detection(std::span<const Detection> dets, double width,
                                             double height) {
  if (!(width > 0 && height > 0)) {
    throw Error(ErrorKind::kInvalidArgument, "image dimensions must be positive");
  }
  if (!dets.empty()) return {dets.begin(), dets.end()};
  return {Detection{kBackground, BBox{0, 0, width, height}, 1.0, Source::kStudent, false}};
}

PseudoLabelSet assemble_pseudo_labels(std::string sample_id, std::span<const Detection> teacher,
                                      std::span<const Detection> student,
                                      const GeneratorCategorySet& gen_cats,
                                      const PseudoLabelConfig& config) {
  PseudoLabelSet out;
  out.sample_id = std::move(sample_id);
  out.provenance.raw_teacher = static_cast<int>(teacher.size());
  out.provenance.raw_student = static_cast<int>(student.size());

  const auto t = threshold_filter(teacher, config.tau);
  const auto s = threshold_filter(student, config.tau);
  out.provenance.after_threshold = static_cast<int>(t.size() + s.size());

  const auto merged = sa_nms(t, s, config.iou_thr);
  out.provenance.after_sa_nms = static_cast<int>(merged.size());

  // A detector "detects" an abnormality only above the confidence threshold.
  out.include_in_unsup_loss = loss_inclusion(t, s, gen_cats);
  out.labels = gip_filter(merged, gen_cats);
  out.provenance.after_gip = static_cast<int>(out.labels.size());
  return out;
}

double category_precision(std::span<const Detection> dets, const std::set<CategoryId>& present) {
  if (dets.empty()) return 1.0;
  const auto hits = std::count_if(dets.begin(), dets.end(),
                                  [&](const Detection& d) { return present.count(d.category) != 0; });
  return static_cast<double>(hits) / static_cast<double>(dets.size());
}

}  // namespace coedg
