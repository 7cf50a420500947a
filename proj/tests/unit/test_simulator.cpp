#include <gtest/gtest.h>

#include "coedg/rng.hpp"
#include "coedg/simulator.hpp"

using namespace coedg;
using namespace coedg::sim;

namespace {

struct Fixture {
  SynthDataset data;
  TruthTable truth;

  Fixture() {
    SynthConfig cfg;
    cfg.n_samples = 60;
    data = synth_dataset(cfg, 8);
    truth = truth_from_samples(data.samples, data.ground_truth);
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

json labeled_epoch(const std::vector<Sample>& samples, const GroundTruthMap& gt) {
  json entries = json::array();
  for (const auto& s : samples) {
    std::vector<Detection> labels;
    for (const auto& g : gt.at(s.id)) labels.push_back({g.category, g.box, 1.0, Source::kGroundTruth, false});
    entries.push_back({{"sample_id", s.id}, {"labels", labels}});
  }
  return {{"labeled", entries}, {"weak", json::array()}};
}

}  // namespace

TEST(Rng, SplitmixAndDeriveSeedAreStable) {
  EXPECT_EQ(splitmix64(0), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
  EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(SimDetector, OracleModeReproducesGroundTruthAfterOneEpoch) {
  DetectorKnobs k;
  k.oracle = true;
  SimDetector d(1, 8, k, fx().truth);
  d.train_epoch(labeled_epoch({fx().data.samples[0]}, fx().data.ground_truth));
  EXPECT_EQ(d.state().skill, 1.0);
  for (const auto& s : fx().data.samples) {
    const auto dets = d.detect(s.id);
    const auto& gt = fx().data.ground_truth.at(s.id);
    ASSERT_EQ(dets.size(), gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
      EXPECT_EQ(dets[i].category, gt[i].category);
      EXPECT_EQ(dets[i].box, gt[i].box);
      EXPECT_EQ(dets[i].score, 1.0);
    }
  }
}

TEST(SimDetector, FullDropAndNoFalsePositivesGivesNothing) {
  DetectorKnobs k;
  k.drop_prob = 1.0;
  k.fp_rate = 0.0;
  k.initial_skill = 0.0;
  const SimDetector d(1, 8, k, fx().truth);
  for (const auto& s : fx().data.samples) EXPECT_TRUE(d.detect(s.id).empty());
}

TEST(SimDetector, JitterReDerivedFromDocumentedDrawOrder) {
  DetectorKnobs k;
  k.drop_prob = 0.0;
  k.fp_rate = 0.0;
  k.initial_skill = 0.3;
  const SimDetector d(77, 8, k, fx().truth);
  for (const auto& s : fx().data.samples) {
    const auto& gt = fx().data.ground_truth.at(s.id);
    if (gt.empty()) continue;
    Rng rng(derive_seed(77, {kDetectStream, fnv1a(s.id), 0}));
    const auto dets = d.detect(s.id);
    ASSERT_EQ(dets.size(), gt.size());
    const double sigma = 24.0 * 0.7;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      rng.uniform();
      const double j0 = rng.normal();
      rng.normal();
      rng.normal();
      rng.normal();
      const double u_score = rng.uniform();
      const double x0 = gt[i].box.x0 + j0 * sigma;
      if (x0 > 0 && x0 < dets[i].box.x1) {
        EXPECT_NEAR(dets[i].box.x0, x0, 1e-9);
      }
      EXPECT_NEAR(dets[i].score, 1.0 - 0.7 * 0.5 * u_score, 1e-12);
    }
  }
}

TEST(SimDetector, DeterministicPerSeedAndDistinctAcrossSeeds) {
  const SimDetector a(3, 8, {}, fx().truth), b(3, 8, {}, fx().truth), c(4, 8, {}, fx().truth);
  bool differs = false;
  for (const auto& s : fx().data.samples) {
    EXPECT_EQ(a.detect(s.id), b.detect(s.id));
    differs |= a.detect(s.id) != c.detect(s.id);
  }
  EXPECT_TRUE(differs);
}

TEST(SimDetector, ReinitEqualsFreshConstruction) {
  SimDetector a(3, 8, {}, fx().truth);
  a.train_epoch(labeled_epoch(fx().data.samples, fx().data.ground_truth));
  EXPECT_GT(a.state().skill, 0.1);
  a.reinit(9);
  const SimDetector fresh(9, 8, {}, fx().truth);
  EXPECT_EQ(state_digest(a.state()), state_digest(fresh.state()));
  for (const auto& s : fx().data.samples) EXPECT_EQ(a.detect(s.id), fresh.detect(s.id));
}

TEST(SimDetector, CorrectLabelsRaiseSkillWrongLabelsDoNot) {
  SimDetector good(1, 8, {}, fx().truth), bad(1, 8, {}, fx().truth);
  good.train_epoch(labeled_epoch(fx().data.samples, fx().data.ground_truth));
  json wrong = json::array();
  for (const auto& s : fx().data.samples) {
    const auto present = fx().truth.at(s.id).categories();
    CategoryId c = 1;
    while (present.count(c)) ++c;
    wrong.push_back({{"sample_id", s.id}, {"labels", std::vector<Detection>{{c, {0, 0, 10, 10}, 1.0, Source::kTeacher, false}}}});
  }
  bad.train_epoch({{"labeled", json::array()}, {"weak", wrong}});
  EXPECT_GT(good.state().skill, bad.state().skill);
  EXPECT_LE(bad.state().skill, 0.1);
}

TEST(SimDetector, StateJsonRoundTrip) {
  SimDetector a(3, 8, {}, fx().truth);
  a.train_epoch(labeled_epoch(fx().data.samples, fx().data.ground_truth));
  const auto back = state_from_json(state_to_json(a.state()));
  EXPECT_EQ(state_digest(back), state_digest(a.state()));
  EXPECT_EQ(state_digest(a.state()).size(), 64u);
}

TEST(SimGenerator, OracleEmitsExactlyTrueCategories) {
  GeneratorKnobs k;
  k.oracle = true;
  const SimGenerator g(2, fx().data.categories, 16, k, fx().truth);
  for (const auto& s : fx().data.samples) {
    const auto in = build_dip_input(s.id, s.width, s.height, {}, DipSource::kStudentFiltered, 5);
    const auto out = g.generate(in);
    EXPECT_EQ(out.categories, fx().truth.at(s.id).categories());
    for (std::size_t c = 0; c < out.category_probs.size(); ++c) {
      EXPECT_EQ(out.category_probs[c] > 0.5, out.categories.count(static_cast<CategoryId>(c + 1)) == 1);
    }
    if (out.categories.empty()) {
      EXPECT_EQ(out.report, normal_sentence());
    }
  }
}

TEST(SimGenerator, EmbeddingsDeterministicWithRequestedDimension) {
  const SimGenerator a(2, fx().data.categories, 12, {}, fx().truth), b(2, fx().data.categories, 12, {}, fx().truth);
  const auto& id = fx().data.samples[0].id;
  EXPECT_EQ(a.embed(id).size(), 12u);
  EXPECT_EQ(a.embed(id), b.embed(id));
}

TEST(SimGenerator, ReinitEqualsFreshConstruction) {
  SimGenerator a(2, fx().data.categories, 16, {}, fx().truth);
  json samples = json::array();
  for (const auto& s : fx().data.samples) {
    std::vector<Detection> gt;
    for (const auto& g : fx().data.ground_truth.at(s.id)) gt.push_back({g.category, g.box, 1, Source::kGroundTruth, false});
    const auto in = build_dip_input(s.id, s.width, s.height, gt, DipSource::kGroundTruth, 5);
    samples.push_back({{"dip_input", in}, {"targets", classification_targets(s.id, gt, 8).multi_hot}, {"reference", s.report}});
  }
  a.train_epoch({{"samples", samples}});
  EXPECT_GT(a.state().skill, 0.1);
  a.reinit(5);
  const SimGenerator fresh(5, fx().data.categories, 16, {}, fx().truth);
  EXPECT_EQ(state_digest(a.state()), state_digest(fresh.state()));
}
