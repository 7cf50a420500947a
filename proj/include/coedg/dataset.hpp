#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coedg/metrics.hpp"

namespace coedg {

// Ordered category names; index 0 is background.
class CategoryTable {
 public:
  CategoryTable() = default;
  /// names excludes background; throws on duplicates.
  explicit CategoryTable(std::vector<std::string> names);

  int size() const { return static_cast<int>(names_.size()); }  // excluding background
  const std::string& name(CategoryId id) const;
  std::optional<CategoryId> find(const std::string& name) const;
  bool contains(CategoryId id) const { return id >= 0 && id <= size(); }
  const std::vector<std::string>& names() const { return names_; }

  /// Eight-finding table used for the MS-CXR-style configuration.
  static CategoryTable chest_xray8();

  friend bool operator==(const CategoryTable&, const CategoryTable&) = default;

 private:
  std::vector<std::string> names_;
};

struct Sample {
  std::string id;
  double width = 0, height = 0;
  Tokens report;
  std::optional<std::vector<GroundTruthBox>> annotations;

  bool labeled() const { return annotations.has_value(); }
  friend bool operator==(const Sample&, const Sample&) = default;
};

struct LoadOptions {
  // Samples for which this returns false are dropped before anything else.
  std::function<bool(const Sample&)> sample_filter;
};

/// Reads the box file (JSON array) and the report file (JSON lines). Samples
/// with a box record are fully labeled; the rest are weakly labeled.
std::vector<Sample> load_dataset(const std::filesystem::path& annotation_file,
                                 const std::filesystem::path& report_file,
                                 const CategoryTable& categories, const LoadOptions& options = {});

void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& annotation_file,
                  const std::filesystem::path& report_file);

CategoryTable load_categories(const std::filesystem::path& path);
void save_categories(const CategoryTable& table, const std::filesystem::path& path);

using GroundTruthMap = std::map<std::string, std::vector<GroundTruthBox>>;

GroundTruthMap load_ground_truth(const std::filesystem::path& path);
void save_ground_truth(const GroundTruthMap& gt, const std::vector<Sample>& samples,
                       const std::filesystem::path& path);

/// COCO detection JSON to labeled samples (empty reports). Categories are
/// matched to the table by name.
std::vector<Sample> samples_from_coco(const std::string& coco_json, const CategoryTable& categories);

struct Split {
  std::vector<Sample> train, val, test;
};

/// 7:1:2 split applied separately to the labeled and weakly labeled pools.
Split split(const std::vector<Sample>& samples, std::uint64_t seed);

/// Pool sizes for a 7:1:2 split of n items (largest remainder, ties to train).
std::array<std::size_t, 3> split_quotas(std::size_t n);

struct Batch {
  std::vector<std::string> labeled_ids;
  std::vector<std::string> weak_ids;
};

struct BatchRatio {
  int labeled = 2;
  int weak = 1;
};

// Mini-batches that mix labeled and weak samples at a fixed ratio. Each epoch
// visits every weak sample once; labeled samples cycle through reshuffled
// passes as often as the ratio demands.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::string> labeled, std::vector<std::string> weak, int batch_size,
               BatchRatio ratio, std::uint64_t seed);

  std::vector<Batch> epoch(int index) const;

 private:
  std::vector<std::string> labeled_;
  std::vector<std::string> weak_;
  int batch_size_;
  BatchRatio ratio_;
  std::uint64_t seed_;
};

/// Lowercases, isolates ASCII punctuation, splits on whitespace.
Tokens tokenize(const std::string& text);
std::string detokenize(const Tokens& tokens);

class Vocabulary {
 public:
  static constexpr const char* kUnknown = "<unk>";

  static Vocabulary build(const std::vector<Tokens>& corpus, int min_frequency = 3);

  bool contains(const std::string& token) const { return words_.count(token) != 0; }
  std::size_t size() const { return words_.size(); }
  Tokens encode(const Tokens& tokens) const;

 private:
  std::map<std::string, int> words_;
};

// Canonical report sentences shared by the synthetic data and the simulated
// generator.
Tokens category_sentence(const CategoryTable& table, CategoryId c, int variant = 0);
Tokens normal_sentence();
inline constexpr int kSentenceVariants = 3;

struct SynthConfig {
  int n_samples = 500;
  int n_categories = 8;
  std::vector<std::pair<int, int>> image_dims = {{512, 512}};
  // Probability of 0..5 boxes per image.
  std::vector<double> boxes_per_image = {0.3, 0.3, 0.2, 0.1, 0.05, 0.05};
  double labeled_fraction = 0.1;
};

struct SynthDataset {
  CategoryTable categories;
  std::vector<Sample> samples;
  GroundTruthMap ground_truth;  // every sample, labeled or not
};

SynthDataset synth_dataset(const SynthConfig& config, std::uint64_t seed);

void write_dataset_dir(const SynthDataset& data, const std::filesystem::path& dir);
SynthDataset read_dataset_dir(const std::filesystem::path& dir, const LoadOptions& options = {});

}  // namespace coedg
