#include "coedg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "coedg/error.hpp"

namespace coedg {

namespace {

struct Ranked {
  const Detection* det;
  std::size_t image;
};

double integrate(const std::vector<double>& recall, const std::vector<double>& precision,
                 ApInterpolation interp) {
  if (interp == ApInterpolation::kElevenPoint) {
    double ap = 0;
    for (int i = 0; i <= 10; ++i) {
      const double t = i / 10.0;
      double best = 0;
      for (std::size_t k = 0; k < recall.size(); ++k) {
        if (recall[k] >= t) best = std::max(best, precision[k]);
      }
      ap += best / 11.0;
    }
    return ap;
  }
  // All-point: area under the monotone precision envelope.
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  return ap;
}

}  // namespace

std::optional<double> average_precision(std::span<const ImageEval> images, CategoryId category,
                                        double iou_thr, ApInterpolation interp) {
  std::size_t n_gt = 0;
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const auto& g : images[i].gts) n_gt += g.category == category;
    for (const auto& p : images[i].preds) {
      if (p.category == category) ranked.push_back({&p, i});
    }
  }
  if (n_gt == 0) return std::nullopt;

  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return ranks_before(*a.det, *b.det); });

  std::vector<std::vector<bool>> used(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) used[i].assign(images[i].gts.size(), false);

  std::vector<double> recall;
  std::vector<double> precision;
  recall.reserve(ranked.size());
  precision.reserve(ranked.size());
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (const auto& r : ranked) {
    const auto& gts = images[r.image].gts;
    double best = -1.0;
    std::size_t best_idx = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].category != category || used[r.image][g]) continue;
      const double o = iou(r.det->box, gts[g].box);
      if (o > best) {
        best = o;
        best_idx = g;
      }
    }
    if (best_idx < gts.size() && best >= iou_thr) {
      used[r.image][best_idx] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  return integrate(recall, precision, interp);
}

std::optional<double> average_precision(std::span<const Detection> preds,
                                        std::span<const GroundTruthBox> gts, CategoryId category,
                                        double iou_thr, ApInterpolation interp) {
  const ImageEval image{{preds.begin(), preds.end()}, {gts.begin(), gts.end()}};
  return average_precision(std::span<const ImageEval>(&image, 1), category, iou_thr, interp);
}

DetEvalResult mean_ap(std::span<const ImageEval> images, std::span<const double> thresholds,
                      ApInterpolation interp) {
  if (thresholds.empty()) throw Error(ErrorKind::kInvalidArgument, "thresholds must be non-empty");
  std::set<CategoryId> categories;
  for (const auto& im : images) {
    for (const auto& g : im.gts) categories.insert(g.category);
  }
  DetEvalResult out;
  out.thresholds.assign(thresholds.begin(), thresholds.end());
  for (const double thr : thresholds) {
    std::map<CategoryId, double> per_cat;
    for (const CategoryId c : categories) {
      if (auto ap = average_precision(images, c, thr, interp)) per_cat[c] = *ap;
    }
    double sum = 0;
    for (const auto& [c, ap] : per_cat) sum += ap;
    out.map.push_back(per_cat.empty() ? 0.0 : sum / static_cast<double>(per_cat.size()));
    out.per_category_ap.push_back(std::move(per_cat));
  }
  return out;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, long>;

NgramCounts count_ngrams(const Tokens& tokens, std::size_t k) {
  NgramCounts out;
  if (tokens.size() < k) return out;
  for (std::size_t i = 0; i + k <= tokens.size(); ++i) {
    ++out[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + k)];
  }
  return out;
}

long clipped_matches(const Tokens& candidate, const Tokens& reference, std::size_t k) {
  const auto cand = count_ngrams(candidate, k);
  const auto ref = count_ngrams(reference, k);
  long matches = 0;
  for (const auto& [gram, count] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) matches += std::min(count, it->second);
  }
  return matches;
}

double brevity_penalty(double cand_len, double ref_len) {
  return std::exp(std::min(0.0, 1.0 - ref_len / cand_len));
}

}  // namespace

double bleu(const Tokens& candidate, const Tokens& reference, int n) {
  if (n < 1) throw Error(ErrorKind::kInvalidArgument, "BLEU order must be >= 1");
  if (candidate.empty()) return 0.0;
  double log_sum = 0;
  for (int k = 1; k <= n; ++k) {
    const long total = static_cast<long>(candidate.size()) - k + 1;
    if (total <= 0) return 0.0;
    const long m = clipped_matches(candidate, reference, static_cast<std::size_t>(k));
    if (m == 0) return 0.0;
    log_sum += std::log(static_cast<double>(m) / static_cast<double>(total));
  }
  return std::exp(log_sum / n) *
         brevity_penalty(static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
}

void CorpusBleu::add(const Tokens& candidate, const Tokens& reference) {
  cand_len_ += static_cast<long>(candidate.size());
  ref_len_ += static_cast<long>(reference.size());
  for (std::size_t k = 1; k <= 4; ++k) {
    if (candidate.size() < k) continue;
    totals_[k - 1] += static_cast<long>(candidate.size() - k + 1);
    matches_[k - 1] += clipped_matches(candidate, reference, k);
  }
}

double CorpusBleu::score(int n) const {
  if (n < 1 || n > 4) throw Error(ErrorKind::kInvalidArgument, "corpus BLEU order must be in 1..4");
  if (cand_len_ == 0) return 0.0;
  double log_sum = 0;
  for (int k = 0; k < n; ++k) {
    if (matches_[k] == 0 || totals_[k] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matches_[k]) / static_cast<double>(totals_[k]));
  }
  return std::exp(log_sum / n) *
         brevity_penalty(static_cast<double>(cand_len_), static_cast<double>(ref_len_));
}

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  std::vector<std::size_t> prev(reference.size() + 1, 0);
  std::vector<std::size_t> cur(reference.size() + 1, 0);
  for (std::size_t i = 1; i <= candidate.size(); ++i) {
    for (std::size_t j = 1; j <= reference.size(); ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[reference.size()]);
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1 + b2) * p * r / (r + b2 * p);
}

namespace {

// 1-based midranks of values.
std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::kInvalidArgument, "arity mismatch");
  const auto ranks = midranks(scores);
  double pos_rank_sum = 0;
  double n_pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0) {
      pos_rank_sum += ranks[i];
      n_pos += 1;
    }
  }
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0;
  return u / (n_pos * n_neg);
}

double multilabel_auc(const std::vector<std::vector<double>>& scores,
                      const std::vector<std::vector<int>>& labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::kInvalidArgument, "arity mismatch");
  const std::size_t k = scores.empty() ? 0 : scores.front().size();
  double sum = 0;
  int valid = 0;
  std::vector<double> col(scores.size());
  std::vector<int> lab(scores.size());
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].size() != k || labels[i].size() != k) {
        throw Error(ErrorKind::kInvalidArgument, "arity mismatch");
      }
      col[i] = scores[i][c];
      lab[i] = labels[i][c];
    }
    if (auto auc = roc_auc(col, lab)) {
      sum += *auc;
      ++valid;
    }
  }
  if (valid == 0) throw Error(ErrorKind::kInvalidArgument, "AUC undefined");
  return sum / valid;
}

double wilcoxon_signed_rank(std::span<const double> paired_diffs, WilcoxonMethod method) {
  std::vector<double> abs_d;
  std::vector<bool> positive;
  for (const double d : paired_diffs) {
    if (d == 0.0) continue;
    abs_d.push_back(std::abs(d));
    positive.push_back(d > 0);
  }
  const std::size_t n = abs_d.size();
  if (n == 0) throw Error(ErrorKind::kInvalidArgument, "degenerate sample");

  const auto ranks = midranks(abs_d);
  double w_plus = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i]) w_plus += ranks[i];
  }
  const bool exact = method == WilcoxonMethod::kExact || (method == WilcoxonMethod::kAuto && n <= 20);

  if (exact) {
    // Midranks are multiples of 1/2, so doubled ranks are integers.
    std::vector<long> doubled(n);
    long total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      doubled[i] = std::lround(2 * ranks[i]);
      total += doubled[i];
    }
    // ways[s] = number of sign assignments with doubled W+ == s.
    std::vector<double> ways(static_cast<std::size_t>(total) + 1, 0.0);
    ways[0] = 1.0;
    long reach = 0;
    for (const long r : doubled) {
      for (long s = reach; s >= 0; --s) {
        if (ways[s] != 0) ways[s + r] += ways[s];
      }
      reach += r;
    }
    const long w = std::lround(2 * w_plus);
    const double all = std::ldexp(1.0, static_cast<int>(n));
    double lower = 0;
    double upper = 0;
    for (long s = 0; s <= total; ++s) {
      if (s <= w) lower += ways[s];
      if (s >= w) upper += ways[s];
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / all);
  }

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1) / 4.0;
  double var = nn * (nn + 1) * (2 * nn + 1) / 24.0;
  std::vector<double> sorted = abs_d;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    var -= (t * t * t - t) / 48.0;
    i = j + 1;
  }
  if (var <= 0) return 1.0;
  const double z = std::max(0.0, std::abs(w_plus - mean) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

RepEvalResult evaluate_reports(const std::vector<Tokens>& candidates,
                               const std::vector<Tokens>& references,
                               const std::vector<std::vector<double>>* scores,
                               const std::vector<std::vector<int>>* labels) {
  if (candidates.size() != references.size()) {
    throw Error(ErrorKind::kInvalidArgument, "candidate/reference count mismatch");
  }
  RepEvalResult out;
  CorpusBleu corpus;
  double rouge_sum = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    corpus.add(candidates[i], references[i]);
    const double r = rouge_l(candidates[i], references[i]);
    out.per_sample_rouge_l.push_back(r);
    rouge_sum += r;
  }
  out.bleu1 = corpus.score(1);
  out.bleu2 = corpus.score(2);
  out.bleu3 = corpus.score(3);
  out.bleu4 = corpus.score(4);
  out.rouge_l = candidates.empty() ? 0.0 : rouge_sum / static_cast<double>(candidates.size());
  if (scores != nullptr && labels != nullptr) {
    try {
      out.auc = multilabel_auc(*scores, *labels);
    } catch (const Error&) {
      out.auc.reset();
    }
  }
  return out;
}

}  // namespace coedg
