#pragma once

#include <array>
#include <span>
#include <vector>

namespace coedg {

// Loss value and its gradient with respect to the prediction inputs, in the
// order the inputs were supplied.
struct LossValue {
  double value = 0.0;
  std::vector<double> gradient;
};

// Probabilities are clamped to [kProbEpsilon, 1 - kProbEpsilon] before any log.
inline constexpr double kProbEpsilon = 1e-7;

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

/// Binary focal loss on one probability. Gradient is d/dp (zero where the
/// clamp is active).
LossValue focal_loss(double p, int target, const FocalParams& params = {});

/// Summed smooth-L1 over element-wise differences pred - target.
LossValue smooth_l1(std::span<const double> pred, std::span<const double> target,
                    double beta = 1.0);

/// Per-category binary cross-entropy, summed.
LossValue multilabel_cross_entropy(std::span<const double> probs, std::span<const int> target);

/// Negative log-likelihood of a teacher-forced reference report.
LossValue report_nll(std::span<const double> token_probs);

// One classification pair: predicted probability and its 0/1 target.
struct ClassTerm {
  double prob = 0.0;
  int target = 0;
};

// One matched box pair, raw corner coordinates.
struct BoxTerm {
  std::array<double, 4> pred{};
  std::array<double, 4> target{};
};

// Loss pairs for one image. Unmatched predictions contribute class terms only.
struct DetectionLossSample {
  std::vector<ClassTerm> classes;
  std::vector<BoxTerm> boxes;
  bool include = true;
};

struct DetectionLossParams {
  FocalParams focal;
  double beta = 1.0;
};

struct DetectionLoss {
  LossValue supervised;
  LossValue unsupervised;
  LossValue total;
};

/// Unweighted sum of supervised and unsupervised terms. Gradients list, per
/// sample in order, the class probabilities then the 4 box coordinates of
/// each box pair. Excluded unsupervised samples contribute zero value and
/// zero gradient.
DetectionLoss detection_loss(std::span<const DetectionLossSample> labeled,
                             std::span<const DetectionLossSample> weak,
                             const DetectionLossParams& params = {});

}  // namespace coedg
