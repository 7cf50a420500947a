#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coedg/geometry.hpp"

namespace coedg {

using Tokens = std::vector<std::string>;

struct GroundTruthBox {
  CategoryId category = kBackground;
  BBox box;
  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

// Predictions and ground truth of one image.
struct ImageEval {
  std::vector<Detection> preds;
  std::vector<GroundTruthBox> gts;
};

enum class ApInterpolation { kAllPoint, kElevenPoint };

/// VOC-style AP for one category. Predictions are ranked by ranks_before
/// across images (image order breaks the remaining ties); each is a true
/// positive iff its best-IoU unmatched same-category ground truth in the same
/// image reaches iou_thr. Returns nullopt when the category has no ground truth.
std::optional<double> average_precision(std::span<const ImageEval> images, CategoryId category,
                                        double iou_thr,
                                        ApInterpolation interp = ApInterpolation::kAllPoint);

// Convenience for a single image.
std::optional<double> average_precision(std::span<const Detection> preds,
                                        std::span<const GroundTruthBox> gts, CategoryId category,
                                        double iou_thr,
                                        ApInterpolation interp = ApInterpolation::kAllPoint);

struct DetEvalResult {
  std::vector<double> thresholds;
  // per_category_ap[t][category] for categories with ground truth.
  std::vector<std::map<CategoryId, double>> per_category_ap;
  std::vector<double> map;
};

/// mAP per IoU threshold, averaged over categories with >= 1 ground-truth box.
DetEvalResult mean_ap(std::span<const ImageEval> images, std::span<const double> thresholds,
                      ApInterpolation interp = ApInterpolation::kAllPoint);

/// Sentence BLEU-n: geometric mean of clipped 1..n-gram precisions times the
/// brevity penalty. No smoothing.
double bleu(const Tokens& candidate, const Tokens& reference, int n);

// Corpus statistics: clipped matches and totals per order, summed lengths.
class CorpusBleu {
 public:
  void add(const Tokens& candidate, const Tokens& reference);
  double score(int n) const;

 private:
  std::array<long, 4> matches_{};
  std::array<long, 4> totals_{};
  long cand_len_ = 0;
  long ref_len_ = 0;
};

inline constexpr double kRougeBeta = 1.2;

/// ROUGE-L F-measure from the longest common subsequence.
double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = kRougeBeta);

/// Macro ROC AUC over categories. scores[i][c] and labels[i][c] per sample i.
/// Categories without both classes are skipped; throws "AUC undefined" if all are.
double multilabel_auc(const std::vector<std::vector<double>>& scores,
                      const std::vector<std::vector<int>>& labels);

/// ROC AUC of one score column via the Mann-Whitney statistic with midranks.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels);

enum class WilcoxonMethod { kAuto, kExact, kNormal };

/// Two-sided Wilcoxon signed-rank p-value. Zero differences are dropped;
/// kAuto is exact for n <= 20 and the tie-corrected normal approximation
/// (with continuity correction) above.
double wilcoxon_signed_rank(std::span<const double> paired_diffs,
                            WilcoxonMethod method = WilcoxonMethod::kAuto);

struct RepEvalResult {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double rouge_l = 0;
  std::optional<double> auc;
  std::optional<double> wilcoxon_p;
  std::vector<double> per_sample_rouge_l;
};

// Corpus BLEU, mean sentence ROUGE-L, and macro AUC when scores are supplied.
RepEvalResult evaluate_reports(const std::vector<Tokens>& candidates,
                               const std::vector<Tokens>& references,
                               const std::vector<std::vector<double>>* scores = nullptr,
                               const std::vector<std::vector<int>>* labels = nullptr);

}  // namespace coedg
