#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "coedg/dataset.hpp"
#include "coedg/dip.hpp"
#include "coedg/json_io.hpp"

namespace coedg::sim {

// Noise model of the simulated detector. Every noise term scales with
// (1 - skill); see docs/simulator.md for the exact draw order.
struct DetectorKnobs {
  double jitter_sigma = 24.0;     // px, per corner
  double drop_prob = 0.5;
  double fp_rate = 1.5;           // expected false positives per image
  double tp_score_spread = 0.5;
  double fp_score_spread = 1.0;
  double initial_skill = 0.1;
  double max_skill = 0.95;
  double learning_rate = 0.25;
  double volume_half = 30.0;      // samples with correct labels at half capacity
  double precision_exponent = 1.0;
  bool oracle = false;            // skill jumps to 1 on the first epoch
};

struct GeneratorKnobs {
  double recall = 1.0;
  double precision = 1.0;
  double initial_skill = 0.1;
  double max_skill = 0.95;
  double learning_rate = 0.3;
  double volume_half = 50.0;
  double detector_support = 0.9;  // recall floor for categories the DIP input points at
  double fooled_rate = 0.5;       // chance a wrong DIP category is echoed, scaled by 1 - skill
  double spurious_rate = 0.05;
  bool oracle = false;            // skill fixed at 1
};

void to_json(json& j, const DetectorKnobs& k);
void from_json(const json& j, DetectorKnobs& k);
void to_json(json& j, const GeneratorKnobs& k);
void from_json(const json& j, GeneratorKnobs& k);

struct ImageTruth {
  double width = 0, height = 0;
  std::vector<GroundTruthBox> boxes;
  std::set<CategoryId> categories() const;
};

using TruthTable = std::map<std::string, ImageTruth>;

json truth_to_json(const TruthTable& truth);
TruthTable truth_from_json(const json& records);
TruthTable truth_from_samples(const std::vector<Sample>& samples, const GroundTruthMap& gt);

// Mutable learning state; the digest covers exactly these fields.
struct AdapterStateRecord {
  std::string role;
  std::uint64_t seed = 0;
  double skill = 0.0;
  std::int64_t version = 0;  // completed training epochs
};

json state_to_json(const AdapterStateRecord& s);
AdapterStateRecord state_from_json(const json& j);
std::string state_digest(const AdapterStateRecord& s);

class SimDetector {
 public:
  SimDetector(std::uint64_t seed, int num_categories, DetectorKnobs knobs, TruthTable truth);

  std::vector<Detection> detect(const std::string& sample_id) const;
  /// Applies one epoch of labels; returns {loss, samples_seen}.
  std::pair<double, int> train_epoch(const json& payload);
  void reinit(std::uint64_t seed);

  const AdapterStateRecord& state() const { return state_; }
  void restore(const AdapterStateRecord& s) { state_ = s; }
  const DetectorKnobs& knobs() const { return knobs_; }

 private:
  const ImageTruth& truth(const std::string& sample_id) const;

  AdapterStateRecord state_;
  int num_categories_;
  DetectorKnobs knobs_;
  TruthTable truth_;
};

struct Generation {
  std::vector<double> category_probs;
  std::set<CategoryId> categories;
  Tokens report;
};

class SimGenerator {
 public:
  SimGenerator(std::uint64_t seed, CategoryTable categories, int embedding_dim, GeneratorKnobs knobs,
               TruthTable truth);

  Generation generate(const DipInput& input) const;
  std::vector<double> token_probs(const Generation& g, const Tokens& reference) const;
  std::vector<double> embed(const std::string& sample_id) const;
  std::pair<double, int> train_epoch(const json& payload);
  void reinit(std::uint64_t seed);

  const AdapterStateRecord& state() const { return state_; }
  void restore(const AdapterStateRecord& s) { state_ = s; }
  int embedding_dim() const { return embedding_dim_; }

 private:
  AdapterStateRecord state_;
  CategoryTable categories_;
  int embedding_dim_;
  GeneratorKnobs knobs_;
  TruthTable truth_;
};

// Stream tags mixed into derive_seed.
inline constexpr std::uint64_t kDetectStream = 0x646574656374ULL;    // "detect"
inline constexpr std::uint64_t kGenerateStream = 0x67656e6572ULL;    // "gener"
inline constexpr std::uint64_t kEmbedStream = 0x656d626564ULL;       // "embed"
inline constexpr std::uint64_t kFalsePositiveStream = 0x6670ULL;     // "fp"

}  // namespace coedg::sim
