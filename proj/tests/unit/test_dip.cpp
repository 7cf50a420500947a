#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "coedg/dip.hpp"
#include "coedg/error.hpp"
#include "coedg/pseudo_label.hpp"

using namespace coedg;

namespace {

Detection det(CategoryId c, BBox b, double s) { return {c, b, s, Source::kStudent, false}; }

}  // namespace

TEST(Quantize, QuarterGrid) {
  EXPECT_EQ(quantize_location({128, 256, 384, 512}, 512, 512), (LocationEmbedding{25, 50, 75, 100}));
}

TEST(Quantize, WholeImage) {
  EXPECT_EQ(quantize_location({0, 0, 512, 512}, 512, 512), (LocationEmbedding{0, 0, 100, 100}));
  EXPECT_EQ(quantize_location({0, 0, 1024, 768}, 1024, 768), (LocationEmbedding{0, 0, 100, 100}));
}

TEST(Quantize, FloorsFractions) {
  // 5/512*100 = 0.976..., 7/512*100 = 1.367...
  EXPECT_EQ(quantize_location({5, 5, 7, 7}, 512, 512), (LocationEmbedding{0, 0, 1, 1}));
}

TEST(Quantize, MatchesDirectFormulaOnIntegerBoxes) {
  std::mt19937_64 gen(2);
  std::uniform_int_distribution<int> c(0, 600);
  for (int i = 0; i < 500; ++i) {
    int a = c(gen), b = c(gen), d = c(gen), e = c(gen);
    if (a == b || d == e) continue;
    const BBox box{double(std::min(a, b)), double(std::min(d, e)), double(std::max(a, b)), double(std::max(d, e))};
    // Integer floor division as the reference.
    const auto q = quantize_location(box, 600, 600);
    EXPECT_EQ(q.q0, static_cast<int>(box.x0) * 100 / 600);
    EXPECT_EQ(q.q1, static_cast<int>(box.y0) * 100 / 600);
    EXPECT_EQ(q.q2, static_cast<int>(box.x1) * 100 / 600);
    EXPECT_EQ(q.q3, static_cast<int>(box.y1) * 100 / 600);
  }
}

TEST(Quantize, OutOfImageThrows) {
  try {
    quantize_location({0, 0, 513, 10}, 512, 512);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "box out of image");
  }
}

TEST(BuildDip, PadsWithNullSlots) {
  const std::vector<Detection> d{det(1, {0, 0, 10, 10}, 0.95), det(2, {10, 10, 20, 20}, 0.99)};
  const auto in = build_dip_input("s", 512, 512, d, DipSource::kStudentFiltered, 5);
  EXPECT_TRUE(in.has_class_token);
  ASSERT_EQ(in.slots.size(), 5u);
  EXPECT_EQ(in.abnormality_count(), 2u);
  EXPECT_EQ(in.slots[0].category, 2);  // higher score first
  EXPECT_EQ(in.slots[1].category, 1);
  for (std::size_t i = 2; i < 5; ++i) EXPECT_EQ(in.slots[i], DipSlot::null_slot());
}

TEST(BuildDip, NormalCaseGivesOneBackgroundSlot) {
  const auto d = normal_case_detection({}, 512, 512);
  const auto in = build_dip_input("s", 512, 512, d, DipSource::kStudentFiltered, 5);
  ASSERT_EQ(in.slots.size(), 5u);
  EXPECT_EQ(in.slots[0].kind, SlotKind::kAbnormality);
  EXPECT_EQ(in.slots[0].category, kBackground);
  EXPECT_EQ(in.slots[0].location, (LocationEmbedding{0, 0, 100, 100}));
  for (std::size_t i = 1; i < 5; ++i) EXPECT_EQ(in.slots[i].kind, SlotKind::kNull);
}

TEST(BuildDip, TruncatesToHighestScores) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Detection> d;
  for (int i = 0; i < 7; ++i) d.push_back(det(1 + i % 3, {double(i), 0, double(i + 5), 5}, u(gen)));
  const auto in = build_dip_input("s", 100, 100, d, DipSource::kStudentFiltered, 5);
  auto sorted = d;
  std::sort(sorted.begin(), sorted.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  ASSERT_EQ(in.slots.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(*in.slots[i].crop, sorted[i].box);
}

TEST(BuildDip, GroundTruthKeepsAnnotationOrder) {
  const std::vector<Detection> d{det(3, {0, 0, 10, 10}, 0.2), det(1, {5, 5, 20, 20}, 0.9)};
  const auto in = build_dip_input("s", 100, 100, d, DipSource::kGroundTruth, 5);
  EXPECT_EQ(in.slots[0].category, 3);
  EXPECT_EQ(in.slots[1].category, 1);
}

TEST(BuildDip, SlotCountBelowOneIsConfigError) {
  try {
    build_dip_input("s", 100, 100, {}, DipSource::kGroundTruth, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(ClassificationTargets, SetProjection) {
  const std::vector<Detection> d{det(2, {0, 0, 1, 1}, 1), det(2, {0, 0, 1, 1}, 1), det(5, {0, 0, 1, 1}, 1)};
  const auto t = classification_targets("s", d, 8);
  EXPECT_EQ(t.multi_hot, (std::vector<int>{0, 1, 0, 0, 1, 0, 0, 0}));
  const auto bg = classification_targets("s", normal_case_detection({}, 10, 10), 8);
  EXPECT_EQ(bg.multi_hot, std::vector<int>(8, 0));
  const std::vector<Detection> bad{det(9, {0, 0, 1, 1}, 1)};
  EXPECT_THROW(classification_targets("s", bad, 8), Error);
}
