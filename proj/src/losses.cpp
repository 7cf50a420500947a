#include "coedg/losses.hpp"

#include <algorithm>
#include <cmath>

#include "coedg/error.hpp"

namespace coedg {

namespace {

struct Clamped {
  double p;
  bool active;
};

Clamped clamp_prob(double p) {
  const double c = std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon);
  return {c, c != p};
}

void check_target(int target) {
  if (target != 0 && target != 1) throw Error(ErrorKind::kInvalidArgument, "target must be 0 or 1");
}

}  // namespace

LossValue focal_loss(double p, int target, const FocalParams& params) {
  check_target(target);
  const auto [q, clamped] = clamp_prob(p);
  const double a = params.alpha;
  const double g = params.gamma;
  double value = 0;
  double grad = 0;
  if (target == 1) {
    const double w = std::pow(1.0 - q, g);
    value = -a * w * std::log(q);
    // d/dq [-a (1-q)^g log q] = a g (1-q)^(g-1) log q - a (1-q)^g / q
    const double dw = g == 0.0 ? 0.0 : g * std::pow(1.0 - q, g - 1.0);
    grad = a * dw * std::log(q) - a * w / q;
  } else {
    const double w = std::pow(q, g);
    value = -(1.0 - a) * w * std::log1p(-q);
    const double dw = g == 0.0 ? 0.0 : g * std::pow(q, g - 1.0);
    grad = -(1.0 - a) * (dw * std::log1p(-q) - w / (1.0 - q));
  }
  return {value, {clamped ? 0.0 : grad}};
}

LossValue smooth_l1(std::span<const double> pred, std::span<const double> target, double beta) {
  if (pred.size() != target.size()) throw Error(ErrorKind::kInvalidArgument, "arity mismatch");
  if (!(beta > 0)) throw Error(ErrorKind::kInvalidArgument, "beta must be positive");
  LossValue out{0.0, std::vector<double>(pred.size())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    if (std::abs(d) < beta) {
      out.value += 0.5 * d * d / beta;
      out.gradient[i] = d / beta;
    } else {
      out.value += std::abs(d) - 0.5 * beta;
      out.gradient[i] = d > 0 ? 1.0 : -1.0;
    }
  }
  return out;
}

LossValue multilabel_cross_entropy(std::span<const double> probs, std::span<const int> target) {
  if (probs.size() != target.size()) throw Error(ErrorKind::kInvalidArgument, "arity mismatch");
  LossValue out{0.0, std::vector<double>(probs.size())};
  for (std::size_t i = 0; i < probs.size(); ++i) {
    check_target(target[i]);
    const auto [q, clamped] = clamp_prob(probs[i]);
    if (target[i] == 1) {
      out.value -= std::log(q);
      out.gradient[i] = clamped ? 0.0 : -1.0 / q;
    } else {
      out.value -= std::log1p(-q);
      out.gradient[i] = clamped ? 0.0 : 1.0 / (1.0 - q);
    }
  }
  return out;
}

LossValue report_nll(std::span<const double> token_probs) {
  if (token_probs.empty()) throw Error(ErrorKind::kInvalidArgument, "empty sequence");
  LossValue out{0.0, std::vector<double>(token_probs.size())};
  for (std::size_t t = 0; t < token_probs.size(); ++t) {
    // Upper clamp at 1: a certain token costs nothing.
    const double q = std::clamp(token_probs[t], kProbEpsilon, 1.0);
    out.value -= std::log(q);
    out.gradient[t] = q != token_probs[t] ? 0.0 : -1.0 / q;
  }
  return out;
}

namespace {

void accumulate(const DetectionLossSample& s, const DetectionLossParams& params, LossValue& acc) {
  for (const auto& c : s.classes) {
    const auto f = focal_loss(c.prob, c.target, params.focal);
    acc.value += f.value;
    acc.gradient.push_back(f.gradient[0]);
  }
  for (const auto& b : s.boxes) {
    const auto r = smooth_l1(b.pred, b.target, params.beta);
    acc.value += r.value;
    acc.gradient.insert(acc.gradient.end(), r.gradient.begin(), r.gradient.end());
  }
}

void accumulate_zero(const DetectionLossSample& s, LossValue& acc) {
  acc.gradient.insert(acc.gradient.end(), s.classes.size() + 4 * s.boxes.size(), 0.0);
}

}  // namespace

DetectionLoss detection_loss(std::span<const DetectionLossSample> labeled,
                             std::span<const DetectionLossSample> weak,
                             const DetectionLossParams& params) {
  DetectionLoss out;
  for (const auto& s : labeled) accumulate(s, params, out.supervised);
  for (const auto& s : weak) {
    if (s.include) {
      accumulate(s, params, out.unsupervised);
    } else {
      accumulate_zero(s, out.unsupervised);
    }
  }
  out.total.value = out.supervised.value + out.unsupervised.value;
  out.total.gradient = out.supervised.gradient;
  out.total.gradient.insert(out.total.gradient.end(), out.unsupervised.gradient.begin(),
                            out.unsupervised.gradient.end());
  return out;
}

}  // namespace coedg
