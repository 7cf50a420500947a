#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "coedg/dataset.hpp"
#include "coedg/dip.hpp"
#include "coedg/json_io.hpp"
#include "coedg/protocol.hpp"
#include "coedg/pseudo_label.hpp"

namespace coedg {

struct AdapterSpec {
  std::string kind = "sim";  // "sim" or "external"
  std::string command;       // external only
  json knobs = json::object();
};

struct DatasetSpec {
  std::string dir;                       // dataset directory, or
  std::optional<SynthConfig> synthetic;  // generated on the fly
};

struct CoEvoConfig {
  int iterations = 3;
  int epochs_per_iteration = 20;
  double tau = 0.9;
  double nms_iou_thr = 0.5;
  int batch_size = 15;
  BatchRatio batch_ratio;
  int max_slots = kDefaultMaxSlots;
  std::uint64_t seed = 0;
  bool semi_oracle = false;
  std::vector<double> thresholds = {0.25, 0.5, 0.75};
  double gen_cat_threshold = 0.5;
  bool feature_enhancement = false;
  int embedding_dim = 16;
  DatasetSpec dataset;
  AdapterSpec detector;
  AdapterSpec generator;
  Timeouts timeouts;

  /// Throws Error(kConfig) naming the offending field.
  void validate() const;
};

CoEvoConfig config_from_json(const json& j);
json config_to_json(const CoEvoConfig& c);
CoEvoConfig load_config(const std::filesystem::path& path);

// Dataset prepared for one run: split, lookup tables and the ground truth the
// simulated adapters see.
struct RunData {
  CategoryTable categories;
  Split split;
  GroundTruthMap truth;
  std::map<std::string, Sample> by_id;

  const Sample& sample(const std::string& id) const;
  std::set<CategoryId> true_categories(const std::string& id) const;
};

RunData prepare_data(const CoEvoConfig& config);
RunData prepare_data(SynthDataset data, std::uint64_t seed);

// Category-level quality of the pseudo labels at one pipeline stage, pooled
// over every weak sample of every epoch of an iteration.
struct StageQuality {
  long labels = 0;
  long correct = 0;    // category present in the image
  long covered = 0;    // (sample, true category) pairs hit by some label
  long positives = 0;  // (sample, true category) pairs
  double precision() const { return labels ? static_cast<double>(correct) / labels : 1.0; }
  double recall() const { return positives ? static_cast<double>(covered) / positives : 1.0; }
  void add(std::span<const Detection> dets, const std::set<CategoryId>& present);
};

struct PseudoQuality {
  StageQuality threshold, sa_nms, gip;
  long excluded = 0;
  long weak_samples = 0;
};

struct IterationLog {
  int iteration = 0;
  DetEvalResult det;
  RepEvalResult rep;
  PseudoQuality quality;
  double teacher_skill = 0, student_skill = 0, generator_skill = 0;
  std::string student_digest, generator_digest;
  long batches = 0;
  long semi_oracle_violations = 0;
};

json to_json_value(const IterationLog& log);
IterationLog log_from_json(const json& j);

struct InferenceResult {
  std::vector<Detection> raw;          // student output before filtering
  std::vector<Detection> detections;   // thresholded, normal case applied
  GenerateResult generation;
};

/// Student detections above tau (or the whole-image normal box) drive the
/// generator's DIP input.
InferenceResult inference(AdapterHandle& student, AdapterHandle& generator, const Sample& sample,
                          double tau, int max_slots);

/// One row per logged iteration: mAP at every configured threshold and BLEU-4.
std::string early_metrics_curves(const std::vector<IterationLog>& log, const std::vector<double>& thresholds);

struct ValPredictions {
  std::vector<std::pair<std::string, std::vector<Detection>>> detections;
  std::vector<std::pair<std::string, GenerateResult>> reports;
};

class Interrupted : public std::runtime_error {
 public:
  Interrupted() : std::runtime_error("interrupted") {}
};

class CoEvolution {
 public:
  CoEvolution(CoEvoConfig config, RunData data);
  ~CoEvolution();

  /// Trains the initial teacher on labeled data and the first generator.
  void bootstrap();
  void train_teacher();
  std::optional<AdapterHandle> take_teacher() { return std::exchange(teacher_, std::nullopt); }
  /// Distills a student, trains a new generator, promotes, evaluates.
  void run_iteration();
  bool done() const { return static_cast<int>(log_.size()) >= config_.iterations; }

  /// Polled between epochs; a set flag raises Interrupted.
  void set_interrupt_flag(const std::atomic<bool>* flag) { interrupt_ = flag; }

  const std::vector<IterationLog>& log() const { return log_; }
  const ValPredictions& last_predictions() const { return predictions_; }
  ProtocolTrace& trace() { return *trace_; }
  const CoEvoConfig& config() const { return config_; }
  const RunData& data() const { return data_; }
  AdapterHandle* teacher() { return teacher_ ? &*teacher_ : nullptr; }
  AdapterHandle* generator() { return generator_ ? &*generator_ : nullptr; }

  /// Everything needed to continue after the last completed iteration.
  json checkpoint() const;
  void restore(const json& checkpoint);

 private:
  AdapterHandle make_adapter(AdapterRole role, const std::string& name, std::uint64_t seed,
                             const std::optional<json>& restore = std::nullopt);
  void train_detector(AdapterHandle& student, bool with_pseudo_labels, IterationLog* entry);
  void train_generator(AdapterHandle& generator, AdapterHandle& guide);
  std::map<std::string, GeneratorCategorySet> generator_categories(
      const std::vector<std::string>& ids, const std::map<std::string, std::vector<Detection>>& teacher_dets);
  void evaluate(AdapterHandle& student, AdapterHandle& generator, IterationLog& entry);
  void check_interrupt() const;

  CoEvoConfig config_;
  RunData data_;
  std::unique_ptr<ProtocolTrace> trace_;
  std::optional<AdapterHandle> teacher_;
  std::optional<AdapterHandle> generator_;
  std::vector<IterationLog> log_;
  std::vector<double> previous_rouge_;
  ValPredictions predictions_;
  const std::atomic<bool>* interrupt_ = nullptr;
};

/// Initial teacher alone: labeled-only training for epochs_per_iteration
/// epochs. The returned handle records no trace.
AdapterHandle train_initial_teacher(const CoEvoConfig& config, const RunData& data);

// ---------------------------------------------------------------------------
// Run directory driver.

struct RunOptions {
  bool resume = false;
  const std::atomic<bool>* interrupt = nullptr;
};

struct RunOutcome {
  bool completed = false;
  std::vector<IterationLog> log;
  std::string trace_digest;
};

/// Runs (or resumes) co-evolution and writes metrics, predictions, summary,
/// trace digest, checkpoint and manifest into out_dir.
RunOutcome run_coevolution(const CoEvoConfig& config, const std::filesystem::path& out_dir,
                           const RunOptions& options = {});

struct SweepRow {
  double tau = 0;
  std::vector<double> map;  // per threshold, from the last iteration
};

std::vector<SweepRow> sweep_tau(const CoEvoConfig& config, const std::vector<double>& taus);
std::string sweep_markdown(const std::vector<SweepRow>& rows, const std::vector<double>& thresholds);
std::string sweep_csv(const std::vector<SweepRow>& rows, const std::vector<double>& thresholds);

/// Markdown tables: one mAP column per threshold; BLEU-1..4, ROUGE-L, AUC.
std::string det_table_markdown(const DetEvalResult& r);
std::string rep_table_markdown(const RepEvalResult& r);

}  // namespace coedg
