#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "coedg/error.hpp"
#include "coedg/losses.hpp"
#include "oracles.hpp"

using namespace coedg;

namespace {

// Focal loss written from the definition: -alpha_t (1 - p_t)^gamma log p_t.
double focal_reference(double p, int y, double alpha, double gamma) {
  const double pt = y == 1 ? p : 1 - p;
  const double at = y == 1 ? alpha : 1 - alpha;
  return -at * std::pow(1 - pt, gamma) * std::log(pt);
}

}  // namespace

TEST(Focal, HalfProbabilityPositive) {
  const auto l = focal_loss(0.5, 1);
  EXPECT_NEAR(l.value, 0.25 * 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(l.value, 0.0433217, 1e-7);
}

TEST(Focal, MatchesDefinition) {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int i = 0; i < 200; ++i) {
    const double p = u(gen);
    for (const int y : {0, 1}) {
      EXPECT_NEAR(focal_loss(p, y, {0.3, 1.5}).value, focal_reference(p, y, 0.3, 1.5), 1e-12);
    }
  }
}

TEST(Focal, GradientMatchesFiniteDifference) {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int i = 0; i < 300; ++i) {
    const double p = u(gen);
    for (const int y : {0, 1}) {
      const auto f = [y](const std::vector<double>& x) { return focal_loss(x[0], y).value; };
      const double fd = oracle::central_diff(f, {p}, 0, 1e-6);
      EXPECT_LT(oracle::rel_err(focal_loss(p, y).gradient[0], fd), 1e-5) << "p=" << p << " y=" << y;
    }
  }
}

TEST(Focal, ClampedInputsAreFiniteWithZeroGradient) {
  for (const double p : {0.0, 1.0, -0.5, 2.0}) {
    for (const int y : {0, 1}) {
      const auto l = focal_loss(p, y);
      EXPECT_TRUE(std::isfinite(l.value));
      EXPECT_EQ(l.gradient[0], 0.0);
    }
  }
  EXPECT_THROW(focal_loss(0.5, 2), Error);
}

TEST(SmoothL1, QuadraticAndLinearRegions) {
  const std::vector<double> p{0.5}, t{0.0};
  EXPECT_DOUBLE_EQ(smooth_l1(p, t).value, 0.125);
  const std::vector<double> p2{2.0};
  EXPECT_DOUBLE_EQ(smooth_l1(p2, t).value, 1.5);
  EXPECT_DOUBLE_EQ(smooth_l1(p2, t).gradient[0], 1.0);
  const std::vector<double> p3{-3.0};
  EXPECT_DOUBLE_EQ(smooth_l1(p3, t).gradient[0], -1.0);
}

TEST(SmoothL1, GradientMatchesFiniteDifference) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> p(4), t(4);
    for (int k = 0; k < 4; ++k) {
      p[k] = u(gen);
      t[k] = u(gen);
    }
    const auto l = smooth_l1(p, t);
    for (std::size_t k = 0; k < 4; ++k) {
      if (std::fabs(std::fabs(p[k] - t[k]) - 1.0) < 1e-4) continue;
      const auto f = [&t](const std::vector<double>& x) { return smooth_l1(x, t).value; };
      EXPECT_LT(oracle::rel_err(l.gradient[k], oracle::central_diff(f, p, k, 1e-6)), 1e-5);
    }
  }
}

TEST(SmoothL1, RejectsBadArguments) {
  const std::vector<double> a{1, 2}, b{1};
  EXPECT_THROW(smooth_l1(a, b), Error);
  EXPECT_THROW(smooth_l1(a, a, 0.0), Error);
}

TEST(MultilabelCe, HalfProbabilitiesGiveKLn2) {
  for (const int k : {1, 3, 8}) {
    const std::vector<double> p(k, 0.5);
    std::vector<int> y(k, 0);
    y[0] = 1;
    EXPECT_NEAR(multilabel_cross_entropy(p, y).value, k * std::log(2.0), 1e-12);
  }
}

TEST(MultilabelCe, GradientMatchesFiniteDifference) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::bernoulli_distribution b(0.5);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> p(5);
    std::vector<int> y(5);
    for (int k = 0; k < 5; ++k) {
      p[k] = u(gen);
      y[k] = b(gen);
    }
    const auto l = multilabel_cross_entropy(p, y);
    const auto f = [&y](const std::vector<double>& x) { return multilabel_cross_entropy(x, y).value; };
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_LT(oracle::rel_err(l.gradient[k], oracle::central_diff(f, p, k, 1e-6)), 1e-5);
    }
  }
}

TEST(ReportNll, ThreeHalfTokens) {
  const std::vector<double> p{0.5, 0.5, 0.5};
  EXPECT_NEAR(report_nll(p).value, 3 * std::log(2.0), 1e-12);
  EXPECT_NEAR(report_nll(p).value, 2.0794, 1e-4);
  EXPECT_DOUBLE_EQ(report_nll(std::vector<double>{1.0}).value, 0.0);
}

TEST(ReportNll, EmptySequenceThrows) {
  try {
    report_nll({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty sequence");
  }
}

TEST(DetectionLoss, TotalIsUnweightedSum) {
  DetectionLossSample lab;
  lab.classes = {{0.7, 1}, {0.2, 0}};
  lab.boxes = {{{10, 10, 50, 50}, {12, 9, 48, 52}}};
  DetectionLossSample weak;
  weak.classes = {{0.6, 1}};
  weak.boxes = {{{0, 0, 1, 1}, {0.5, 0, 1, 1}}};
  const std::vector<DetectionLossSample> l{lab}, w{weak};
  const auto d = detection_loss(l, w);
  const double sup = focal_loss(0.7, 1).value + focal_loss(0.2, 0).value +
                     smooth_l1(lab.boxes[0].pred, lab.boxes[0].target).value;
  const double uns = focal_loss(0.6, 1).value + smooth_l1(weak.boxes[0].pred, weak.boxes[0].target).value;
  EXPECT_NEAR(d.supervised.value, sup, 1e-12);
  EXPECT_NEAR(d.unsupervised.value, uns, 1e-12);
  EXPECT_NEAR(d.total.value, sup + uns, 1e-12);
  EXPECT_EQ(d.total.gradient.size(), 2u + 4u + 1u + 4u);
}

TEST(DetectionLoss, ExcludedSampleContributesNothing) {
  DetectionLossSample weak;
  weak.classes = {{0.6, 1}};
  weak.boxes = {{{0, 0, 1, 1}, {0.5, 0, 1, 1}}};
  weak.include = false;
  const std::vector<DetectionLossSample> w{weak};
  const auto d = detection_loss({}, w);
  EXPECT_EQ(d.unsupervised.value, 0.0);
  EXPECT_EQ(d.total.gradient, std::vector<double>(5, 0.0));
}

TEST(DetectionLoss, GradientMatchesFiniteDifference) {
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> prob(0.02, 0.98), coord(0, 10);
  for (int trial = 0; trial < 50; ++trial) {
    DetectionLossSample s;
    s.classes = {{prob(gen), 1}, {prob(gen), 0}};
    BoxTerm b;
    for (int k = 0; k < 4; ++k) {
      b.pred[k] = coord(gen);
      b.target[k] = coord(gen);
    }
    s.boxes = {b};
    std::vector<double> x{s.classes[0].prob, s.classes[1].prob, b.pred[0], b.pred[1], b.pred[2], b.pred[3]};
    const auto f = [&s](const std::vector<double>& v) {
      DetectionLossSample c = s;
      c.classes[0].prob = v[0];
      c.classes[1].prob = v[1];
      for (int k = 0; k < 4; ++k) c.boxes[0].pred[k] = v[2 + k];
      return detection_loss(std::vector<DetectionLossSample>{c}, {}).total.value;
    };
    const auto g = detection_loss(std::vector<DetectionLossSample>{s}, {}).total.gradient;
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (k >= 2 && std::fabs(std::fabs(b.pred[k - 2] - b.target[k - 2]) - 1.0) < 1e-4) continue;
      EXPECT_LT(oracle::rel_err(g[k], oracle::central_diff(f, x, k, 1e-6)), 1e-5);
    }
  }
}
