#include "coedg/coevolution.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <iomanip>
#include <sstream>

#include "coedg/error.hpp"
#include "coedg/geometry.hpp"
#include "coedg/metrics.hpp"
#include "coedg/rng.hpp"
#include "coedg/simulator.hpp"

namespace coedg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorKind::kConfig, "config: " + what); }

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      config_error("unknown key '" + where + key + "'");
    }
  }
}

json synth_to_json(const SynthConfig& s) {
  json dims = json::array();
  for (const auto& [w, h] : s.image_dims) dims.push_back({w, h});
  return json{{"n_samples", s.n_samples},
              {"n_categories", s.n_categories},
              {"image_dims", dims},
              {"boxes_per_image", s.boxes_per_image},
              {"labeled_fraction", s.labeled_fraction}};
}

SynthConfig synth_from_json(const json& j) {
  reject_unknown(j, {"n_samples", "n_categories", "image_dims", "boxes_per_image", "labeled_fraction"},
                 "dataset.synthetic.");
  SynthConfig s;
  s.n_samples = j.value("n_samples", s.n_samples);
  s.n_categories = j.value("n_categories", s.n_categories);
  if (j.contains("image_dims")) {
    s.image_dims.clear();
    for (const auto& d : j["image_dims"]) s.image_dims.emplace_back(d.at(0).get<int>(), d.at(1).get<int>());
  }
  s.boxes_per_image = j.value("boxes_per_image", s.boxes_per_image);
  s.labeled_fraction = j.value("labeled_fraction", s.labeled_fraction);
  return s;
}

json adapter_to_json(const AdapterSpec& a) {
  json j{{"kind", a.kind}, {"knobs", a.knobs}};
  if (!a.command.empty()) j["command"] = a.command;
  return j;
}

AdapterSpec adapter_from_json(const json& j, const std::string& where) {
  reject_unknown(j, {"kind", "command", "knobs"}, where + ".");
  AdapterSpec a;
  a.kind = j.value("kind", a.kind);
  a.command = j.value("command", a.command);
  a.knobs = j.value("knobs", json::object());
  return a;
}

}  // namespace

void CoEvoConfig::validate() const {
  if (iterations < 1) config_error("iterations must be >= 1");
  if (epochs_per_iteration < 1) config_error("epochs_per_iteration must be >= 1");
  if (!(tau > 0.0 && tau <= 1.0)) config_error("tau must be in (0, 1]");
  if (!(nms_iou_thr > 0.0 && nms_iou_thr <= 1.0)) config_error("nms_iou_thr must be in (0, 1]");
  if (batch_size < 1) config_error("batch_size must be >= 1");
  if (batch_ratio.labeled < 0 || batch_ratio.weak < 0 || batch_ratio.labeled + batch_ratio.weak == 0) {
    config_error("batch_ratio must be two non-negative integers, not both zero");
  }
  if (max_slots < 1) config_error("max_slots must be >= 1");
  if (thresholds.empty()) config_error("thresholds must not be empty");
  for (const double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) config_error("thresholds must lie in (0, 1]");
  }
  if (!(gen_cat_threshold >= 0.0 && gen_cat_threshold <= 1.0)) config_error("gen_cat_threshold must be in [0, 1]");
  if (embedding_dim < 1) config_error("embedding_dim must be >= 1");
  for (const auto* a : {&detector, &generator}) {
    if (a->kind != "sim" && a->kind != "external") config_error("adapter kind must be 'sim' or 'external'");
    if (a->kind == "external" && a->command.empty()) config_error("external adapter needs a command");
  }
  if (!dataset.dir.empty() && dataset.synthetic) config_error("dataset takes either dir or synthetic, not both");
}

CoEvoConfig config_from_json(const json& j) {
  if (!j.is_object()) config_error("top level must be an object");
  reject_unknown(j,
                 {"iterations", "epochs_per_iteration", "tau", "nms_iou_thr", "batch_size", "batch_ratio",
                  "max_slots", "seed", "semi_oracle", "thresholds", "gen_cat_threshold", "feature_enhancement",
                  "embedding_dim", "dataset", "detector", "generator", "deadline_ms", "handshake_timeout_ms"},
                 "");
  CoEvoConfig c;
  try {
    c.iterations = j.value("iterations", c.iterations);
    c.epochs_per_iteration = j.value("epochs_per_iteration", c.epochs_per_iteration);
    c.tau = j.value("tau", c.tau);
    c.nms_iou_thr = j.value("nms_iou_thr", c.nms_iou_thr);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("batch_ratio")) {
      const auto& r = j["batch_ratio"];
      if (!r.is_array() || r.size() != 2) config_error("batch_ratio must be [labeled, weak]");
      c.batch_ratio = {r[0].get<int>(), r[1].get<int>()};
    }
    c.max_slots = j.value("max_slots", c.max_slots);
    c.seed = j.value("seed", c.seed);
    c.semi_oracle = j.value("semi_oracle", c.semi_oracle);
    c.thresholds = j.value("thresholds", c.thresholds);
    c.gen_cat_threshold = j.value("gen_cat_threshold", c.gen_cat_threshold);
    c.feature_enhancement = j.value("feature_enhancement", c.feature_enhancement);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      reject_unknown(d, {"dir", "synthetic"}, "dataset.");
      c.dataset.dir = d.value("dir", std::string());
      if (d.contains("synthetic")) c.dataset.synthetic = synth_from_json(d["synthetic"]);
    }
    if (j.contains("detector")) c.detector = adapter_from_json(j["detector"], "detector");
    if (j.contains("generator")) c.generator = adapter_from_json(j["generator"], "generator");
    c.timeouts.request = std::chrono::milliseconds(j.value("deadline_ms", c.timeouts.request.count()));
    c.timeouts.handshake = std::chrono::milliseconds(j.value("handshake_timeout_ms", c.timeouts.handshake.count()));
  } catch (const json::exception& e) {
    config_error(e.what());
  }
  c.validate();
  return c;
}

json config_to_json(const CoEvoConfig& c) {
  json dataset = json::object();
  if (!c.dataset.dir.empty()) dataset["dir"] = c.dataset.dir;
  if (c.dataset.synthetic) dataset["synthetic"] = synth_to_json(*c.dataset.synthetic);
  return json{{"iterations", c.iterations},
              {"epochs_per_iteration", c.epochs_per_iteration},
              {"tau", c.tau},
              {"nms_iou_thr", c.nms_iou_thr},
              {"batch_size", c.batch_size},
              {"batch_ratio", {c.batch_ratio.labeled, c.batch_ratio.weak}},
              {"max_slots", c.max_slots},
              {"seed", c.seed},
              {"semi_oracle", c.semi_oracle},
              {"thresholds", c.thresholds},
              {"gen_cat_threshold", c.gen_cat_threshold},
              {"feature_enhancement", c.feature_enhancement},
              {"embedding_dim", c.embedding_dim},
              {"dataset", dataset},
              {"detector", adapter_to_json(c.detector)},
              {"generator", adapter_to_json(c.generator)},
              {"deadline_ms", c.timeouts.request.count()},
              {"handshake_timeout_ms", c.timeouts.handshake.count()}};
}

CoEvoConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::kConfig, "config file not found: " + path.string());
  auto c = config_from_json(read_json_file(path));
  // Relative dataset directories resolve against the config file.
  if (!c.dataset.dir.empty() && fs::path(c.dataset.dir).is_relative()) {
    c.dataset.dir = (path.parent_path() / c.dataset.dir).lexically_normal().string();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Data

const Sample& RunData::sample(const std::string& id) const {
  auto it = by_id.find(id);
  if (it == by_id.end()) throw Error(ErrorKind::kInvalidArgument, "unknown sample '" + id + "'");
  return it->second;
}

std::set<CategoryId> RunData::true_categories(const std::string& id) const {
  std::set<CategoryId> out;
  if (auto it = truth.find(id); it != truth.end()) {
    for (const auto& g : it->second) out.insert(g.category);
  }
  return out;
}

RunData prepare_data(SynthDataset data, std::uint64_t seed) {
  RunData out;
  out.categories = std::move(data.categories);
  out.truth = std::move(data.ground_truth);
  for (const auto& s : data.samples) {
    if (s.annotations && !out.truth.count(s.id)) out.truth[s.id] = *s.annotations;
  }
  out.split = split(data.samples, seed);
  for (auto& s : data.samples) out.by_id.emplace(s.id, std::move(s));
  return out;
}

RunData prepare_data(const CoEvoConfig& config) {
  if (!config.dataset.dir.empty()) return prepare_data(read_dataset_dir(config.dataset.dir), config.seed);
  return prepare_data(synth_dataset(config.dataset.synthetic.value_or(SynthConfig{}), config.seed), config.seed);
}

// ---------------------------------------------------------------------------
// Logs

void StageQuality::add(std::span<const Detection> dets, const std::set<CategoryId>& present) {
  std::set<CategoryId> hit;
  for (const auto& d : dets) {
    if (d.category == kBackground) continue;
    ++labels;
    if (present.count(d.category)) {
      ++correct;
      hit.insert(d.category);
    }
  }
  covered += static_cast<long>(hit.size());
  positives += static_cast<long>(present.size());
}

namespace {

json stage_json(const StageQuality& s) {
  return json{{"labels", s.labels},
              {"correct", s.correct},
              {"covered", s.covered},
              {"positives", s.positives},
              {"precision", s.precision()},
              {"recall", s.recall()}};
}

StageQuality stage_from_json(const json& j) {
  return {j.at("labels").get<long>(), j.at("correct").get<long>(), j.at("covered").get<long>(),
          j.at("positives").get<long>()};
}

}  // namespace

json to_json_value(const IterationLog& l) {
  return json{{"iteration", l.iteration},
              {"det", l.det},
              {"rep", l.rep},
              {"pseudo_labels",
               {{"threshold", stage_json(l.quality.threshold)},
                {"sa_nms", stage_json(l.quality.sa_nms)},
                {"gip", stage_json(l.quality.gip)},
                {"excluded", l.quality.excluded},
                {"weak_samples", l.quality.weak_samples}}},
              {"teacher_skill", l.teacher_skill},
              {"student_skill", l.student_skill},
              {"generator_skill", l.generator_skill},
              {"student_digest", l.student_digest},
              {"generator_digest", l.generator_digest},
              {"batches", l.batches},
              {"semi_oracle_violations", l.semi_oracle_violations}};
}

IterationLog log_from_json(const json& j) {
  IterationLog l;
  l.iteration = j.at("iteration").get<int>();
  l.det = j.at("det").get<DetEvalResult>();
  l.rep = j.at("rep").get<RepEvalResult>();
  const auto& p = j.at("pseudo_labels");
  l.quality.threshold = stage_from_json(p.at("threshold"));
  l.quality.sa_nms = stage_from_json(p.at("sa_nms"));
  l.quality.gip = stage_from_json(p.at("gip"));
  l.quality.excluded = p.at("excluded").get<long>();
  l.quality.weak_samples = p.at("weak_samples").get<long>();
  l.teacher_skill = j.at("teacher_skill").get<double>();
  l.student_skill = j.at("student_skill").get<double>();
  l.generator_skill = j.at("generator_skill").get<double>();
  l.student_digest = j.at("student_digest").get<std::string>();
  l.generator_digest = j.at("generator_digest").get<std::string>();
  l.batches = j.at("batches").get<long>();
  l.semi_oracle_violations = j.at("semi_oracle_violations").get<long>();
  return l;
}

namespace {

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string threshold_label(double t) {
  std::ostringstream os;
  os << t;
  return os.str();
}

std::vector<Detection> gt_detections(const std::vector<GroundTruthBox>& boxes) {
  std::vector<Detection> out;
  out.reserve(boxes.size());
  for (const auto& g : boxes) out.push_back({g.category, g.box, 1.0, Source::kGroundTruth, false});
  return out;
}

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace

std::string early_metrics_curves(const std::vector<IterationLog>& log, const std::vector<double>& thresholds) {
  std::string out = "iteration";
  for (const double t : thresholds) out += ",map@" + threshold_label(t);
  out += ",bleu4\n";
  for (const auto& l : log) {
    out += std::to_string(l.iteration);
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      out += "," + fixed(i < l.det.map.size() ? l.det.map[i] : 0.0, 6);
    }
    out += "," + fixed(l.rep.bleu4, 6) + "\n";
  }
  return out;
}

std::string det_table_markdown(const DetEvalResult& r) {
  std::string head = "|";
  std::string rule = "|";
  std::string row = "|";
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
    head += " mAP@" + threshold_label(r.thresholds[i]) + " |";
    rule += "---|";
    row += " " + fixed(100.0 * r.map[i], 2) + " |";
  }
  return head + "\n" + rule + "\n" + row + "\n";
}

std::string rep_table_markdown(const RepEvalResult& r) {
  return "| BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | ROUGE-L | AUC |\n|---|---|---|---|---|---|\n| " + fixed(r.bleu1, 3) +
         " | " + fixed(r.bleu2, 3) + " | " + fixed(r.bleu3, 3) + " | " + fixed(r.bleu4, 3) + " | " +
         fixed(r.rouge_l, 3) + " | " + (r.auc ? fixed(*r.auc, 3) : std::string("n/a")) + " |\n";
}

InferenceResult inference(AdapterHandle& student, AdapterHandle& generator, const Sample& sample, double tau,
                          int max_slots) {
  InferenceResult out;
  out.raw = student.detect(sample.id);
  out.detections = normal_case_detection(threshold_filter(out.raw, tau), sample.width, sample.height);
  const auto dip =
      build_dip_input(sample.id, sample.width, sample.height, out.detections, DipSource::kStudentFiltered, max_slots);
  out.generation = generator.generate(dip);
  return out;
}

// ---------------------------------------------------------------------------
// Orchestrator

namespace {

constexpr std::uint64_t kTeacherSeedTag = fnv1a("teacher");
constexpr std::uint64_t kStudentSeedTag = fnv1a("student");
constexpr std::uint64_t kGeneratorSeedTag = fnv1a("generator");
constexpr std::uint64_t kBatchSeedTag = fnv1a("batches");

}  // namespace

CoEvolution::CoEvolution(CoEvoConfig config, RunData data)
    : config_(std::move(config)), data_(std::move(data)), trace_(std::make_unique<ProtocolTrace>()) {
  config_.validate();
}

CoEvolution::~CoEvolution() {
  try {
    if (teacher_) teacher_->shutdown();
    if (generator_) generator_->shutdown();
  } catch (...) {
  }
}

void CoEvolution::check_interrupt() const {
  if (interrupt_ != nullptr && interrupt_->load()) throw Interrupted();
}

AdapterHandle CoEvolution::make_adapter(AdapterRole role, const std::string& name, std::uint64_t seed,
                                        const std::optional<json>& restore) {
  const AdapterSpec& spec = role == AdapterRole::kDetector ? config_.detector : config_.generator;
  std::vector<Sample> all;
  all.reserve(data_.by_id.size());
  for (const auto& [_, s] : data_.by_id) all.push_back(s);

  InitParams params;
  params.seed = seed;
  params.categories = data_.categories.names();
  params.embedding_dim = config_.embedding_dim;
  params.sim = json{{"knobs", spec.knobs}, {"ground_truth", sim::truth_to_json(sim::truth_from_samples(all, data_.truth))}};
  params.restore = restore;
  if (spec.kind == "external") {
    return spawn_external(spec.command, role, params, name, trace_.get(), config_.timeouts);
  }
  return make_simulated(role, params, name, trace_.get());
}

std::map<std::string, GeneratorCategorySet> CoEvolution::generator_categories(
    const std::vector<std::string>& ids, const std::map<std::string, std::vector<Detection>>& teacher_dets) {
  std::map<std::string, GeneratorCategorySet> out;
  for (const auto& id : ids) {
    if (config_.semi_oracle) {
      out[id] = {id, data_.true_categories(id)};
      continue;
    }
    const auto& s = data_.sample(id);
    const auto dets = normal_case_detection(threshold_filter(teacher_dets.at(id), config_.tau), s.width, s.height);
    const auto dip = build_dip_input(id, s.width, s.height, dets, DipSource::kStudentFiltered, config_.max_slots);
    const auto gen = generator_->generate(dip);
    out[id] = categories_from_probs(id, gen.category_probs, config_.gen_cat_threshold);
  }
  return out;
}

void CoEvolution::train_detector(AdapterHandle& student, bool with_pseudo_labels, IterationLog* entry) {
  std::vector<std::string> labeled;
  std::vector<std::string> weak;
  for (const auto& s : data_.split.train) {
    if (s.labeled()) {
      labeled.push_back(s.id);
    } else if (with_pseudo_labels) {
      weak.push_back(s.id);
    }
  }
  if (labeled.empty()) throw Error(ErrorKind::kConfig, "no labeled training samples");
  const BatchRatio ratio = with_pseudo_labels ? config_.batch_ratio : BatchRatio{1, 0};
  const auto k = static_cast<std::uint64_t>(log_.size());
  const BatchSampler sampler(labeled, weak, config_.batch_size, ratio,
                             derive_seed(config_.seed, {kBatchSeedTag, with_pseudo_labels ? k + 1 : 0}));

  // The teacher is frozen for the whole iteration, so its outputs and the
  // generator categories derived from them are computed once.
  std::map<std::string, std::vector<Detection>> teacher_dets;
  std::map<std::string, GeneratorCategorySet> gen_cats;
  if (with_pseudo_labels) {
    for (const auto& id : weak) teacher_dets[id] = teacher_->detect(id);
    gen_cats = generator_categories(weak, teacher_dets);
  }
  bool enhance = with_pseudo_labels && config_.feature_enhancement;
  const PseudoLabelConfig plc{config_.tau, config_.nms_iou_thr};

  for (int epoch = 0; epoch < config_.epochs_per_iteration; ++epoch) {
    check_interrupt();
    const auto batches = sampler.epoch(epoch);
    std::map<std::string, std::vector<Detection>> student_dets;
    json embeddings = json::object();
    json labeled_entries = json::array();
    json weak_entries = json::array();

    for (const auto& batch : batches) {
      for (const auto& id : batch.labeled_ids) {
        labeled_entries.push_back(json{{"sample_id", id}, {"labels", gt_detections(data_.truth.at(id))}});
      }
      StageQuality before;
      StageQuality after;
      for (const auto& id : batch.weak_ids) {
        auto it = student_dets.find(id);
        if (it == student_dets.end()) it = student_dets.emplace(id, student.detect(id)).first;
        const auto& t = teacher_dets.at(id);
        const auto& st = it->second;
        const auto present = data_.true_categories(id);

        const auto t_thr = threshold_filter(t, config_.tau);
        const auto s_thr = threshold_filter(st, config_.tau);
        auto thr = t_thr;
        thr.insert(thr.end(), s_thr.begin(), s_thr.end());
        const auto merged = sa_nms(t_thr, s_thr, config_.nms_iou_thr);
        const auto pl = assemble_pseudo_labels(id, t, st, gen_cats.at(id), plc);

        if (entry != nullptr) {
          entry->quality.threshold.add(thr, present);
          entry->quality.sa_nms.add(merged, present);
          entry->quality.gip.add(pl.labels, present);
          entry->quality.excluded += pl.include_in_unsup_loss ? 0 : 1;
          ++entry->quality.weak_samples;
        }
        before.add(merged, present);
        after.add(pl.labels, present);
        weak_entries.push_back(
            json{{"sample_id", id}, {"labels", pl.labels}, {"include", pl.include_in_unsup_loss}});

        if (enhance && !embeddings.contains(id)) {
          try {
            embeddings[id] = generator_->embed(id);
          } catch (const Error& e) {
            if (e.kind() != ErrorKind::kUnsupported) throw;
            spdlog::warn("generator does not provide embeddings; feature enhancement disabled");
            enhance = false;
          }
        }
      }
      if (entry != nullptr) {
        ++entry->batches;
        const bool had_false_positive = before.correct < before.labels;
        const bool violated = after.precision() < before.precision() ||
                              (had_false_positive && !(after.precision() > before.precision()));
        if (config_.semi_oracle && violated) ++entry->semi_oracle_violations;
      }
    }

    json payload{{"epoch", epoch}, {"labeled", labeled_entries}, {"weak", weak_entries}};
    if (enhance) payload["embeddings"] = embeddings;
    const auto report = student.train_epoch(payload);
    spdlog::debug("{} epoch {}: loss {:.4f}, skill {:.4f}", student.name(), epoch, report.loss,
                  student.skill().value_or(0.0));
  }
}

void CoEvolution::train_generator(AdapterHandle& generator, AdapterHandle& guide) {
  const int n_cat = data_.categories.size();
  json samples = json::array();
  for (const auto& s : data_.split.train) {
    std::vector<Detection> dets;
    DipSource source = DipSource::kGroundTruth;
    if (s.labeled()) {
      dets = gt_detections(*s.annotations);
    } else {
      dets = threshold_filter(guide.detect(s.id), config_.tau);
      source = DipSource::kStudentFiltered;
    }
    dets = normal_case_detection(dets, s.width, s.height);
    const auto dip = build_dip_input(s.id, s.width, s.height, dets, source, config_.max_slots);
    const auto targets = classification_targets(s.id, dets, n_cat);
    samples.push_back(
        json{{"sample_id", s.id}, {"dip_input", dip}, {"targets", targets.multi_hot}, {"reference", s.report}});
  }
  for (int epoch = 0; epoch < config_.epochs_per_iteration; ++epoch) {
    check_interrupt();
    const auto report = generator.train_epoch(json{{"epoch", epoch}, {"samples", samples}});
    spdlog::debug("{} epoch {}: loss {:.4f}, skill {:.4f}", generator.name(), epoch, report.loss,
                  generator.skill().value_or(0.0));
  }
}

void CoEvolution::evaluate(AdapterHandle& student, AdapterHandle& generator, IterationLog& entry) {
  std::vector<ImageEval> images;
  std::vector<Tokens> candidates;
  std::vector<Tokens> references;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<int>> labels;
  predictions_ = {};
  for (const auto& s : data_.split.val) {
    auto result = inference(student, generator, s, config_.tau, config_.max_slots);
    if (auto it = data_.truth.find(s.id); it != data_.truth.end()) {
      images.push_back({result.raw, it->second});
      const auto present = data_.true_categories(s.id);
      std::vector<int> row(static_cast<std::size_t>(data_.categories.size()), 0);
      for (const CategoryId c : present) {
        if (c != kBackground) row[static_cast<std::size_t>(c - 1)] = 1;
      }
      scores.push_back(result.generation.category_probs);
      labels.push_back(std::move(row));
    }
    candidates.push_back(result.generation.report);
    references.push_back(s.report);
    predictions_.detections.emplace_back(s.id, std::move(result.raw));
    predictions_.reports.emplace_back(s.id, std::move(result.generation));
  }
  entry.det = mean_ap(images, config_.thresholds);
  entry.rep = evaluate_reports(candidates, references, &scores, &labels);
  if (previous_rouge_.size() == entry.rep.per_sample_rouge_l.size() && !previous_rouge_.empty()) {
    std::vector<double> diffs;
    for (std::size_t i = 0; i < previous_rouge_.size(); ++i) {
      diffs.push_back(entry.rep.per_sample_rouge_l[i] - previous_rouge_[i]);
    }
    try {
      entry.rep.wilcoxon_p = wilcoxon_signed_rank(diffs);
    } catch (const Error&) {
      entry.rep.wilcoxon_p.reset();  // every difference was zero
    }
  }
  previous_rouge_ = entry.rep.per_sample_rouge_l;
}

void CoEvolution::train_teacher() {
  auto teacher = make_adapter(AdapterRole::kDetector, "initial", derive_seed(config_.seed, {kTeacherSeedTag}));
  train_detector(teacher, false, nullptr);
  teacher.rename("teacher");
  teacher_.emplace(std::move(teacher));
  spdlog::info("initial teacher trained (skill {:.4f})", teacher_->skill().value_or(0.0));
}

void CoEvolution::bootstrap() {
  train_teacher();
  generator_.emplace(
      make_adapter(AdapterRole::kGenerator, "generator", derive_seed(config_.seed, {kGeneratorSeedTag, 0})));
  train_generator(*generator_, *teacher_);
  spdlog::info("initial generator trained (skill {:.4f})", generator_->skill().value_or(0.0));
}

void CoEvolution::run_iteration() {
  if (!teacher_ || !generator_) throw Error(ErrorKind::kInternal, "run_iteration before bootstrap");
  if (done()) throw Error(ErrorKind::kInternal, "all iterations already completed");
  const auto k = static_cast<std::uint64_t>(log_.size());
  IterationLog entry;
  entry.iteration = static_cast<int>(k);
  entry.teacher_skill = teacher_->skill().value_or(0.0);

  auto student = make_adapter(AdapterRole::kDetector, "student", derive_seed(config_.seed, {kStudentSeedTag}));
  train_detector(student, true, &entry);
  entry.student_skill = student.skill().value_or(0.0);
  entry.student_digest = student.state_digest();

  // The student is frozen from here on; it guides the next generator.
  generator_->reinit(derive_seed(config_.seed, {kGeneratorSeedTag, k + 1}));
  train_generator(*generator_, student);
  entry.generator_skill = generator_->skill().value_or(0.0);
  entry.generator_digest = generator_->state_digest();

  teacher_->shutdown();
  teacher_.reset();
  student.rename("teacher");
  teacher_.emplace(std::move(student));

  evaluate(*teacher_, *generator_, entry);
  spdlog::info("iteration {}: mAP {} | BLEU-4 {:.4f} | pseudo-label precision {:.4f}", k,
               fixed(entry.det.map.empty() ? 0.0 : entry.det.map[std::min<std::size_t>(1, entry.det.map.size() - 1)], 4),
               entry.rep.bleu4, entry.quality.gip.precision());
  log_.push_back(std::move(entry));
}

json CoEvolution::checkpoint() const {
  if (!teacher_ || !generator_) throw Error(ErrorKind::kInternal, "nothing to checkpoint");
  if (teacher_->adapter_state().is_null() || generator_->adapter_state().is_null()) {
    throw Error(ErrorKind::kUnsupported, "adapters do not report their state; cannot checkpoint");
  }
  json log = json::array();
  for (const auto& l : log_) log.push_back(to_json_value(l));
  return json{{"format", 1},
              {"config", config_to_json(config_)},
              {"completed_iterations", log_.size()},
              {"log", log},
              {"teacher_state", teacher_->adapter_state()},
              {"generator_state", generator_->adapter_state()},
              {"previous_rouge_l", previous_rouge_},
              {"trace_digest", trace_->digest()}};
}

void CoEvolution::restore(const json& ckpt) {
  try {
    if (ckpt.at("config") != config_to_json(config_)) {
      throw Error(ErrorKind::kConfig, "checkpoint was written with a different config");
    }
    log_.clear();
    for (const auto& l : ckpt.at("log")) log_.push_back(log_from_json(l));
    previous_rouge_ = ckpt.at("previous_rouge_l").get<std::vector<double>>();
    trace_->chain(ckpt.at("trace_digest").get<std::string>());
    const json& ts = ckpt.at("teacher_state");
    const json& gs = ckpt.at("generator_state");
    teacher_.reset();
    generator_.reset();
    teacher_.emplace(make_adapter(AdapterRole::kDetector, "teacher", ts.at("seed").get<std::uint64_t>(), ts));
    generator_.emplace(make_adapter(AdapterRole::kGenerator, "generator", gs.at("seed").get<std::uint64_t>(), gs));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("malformed checkpoint: ") + e.what());
  }
}

AdapterHandle train_initial_teacher(const CoEvoConfig& config, const RunData& data) {
  CoEvolution ce(config, data);
  ce.train_teacher();
  auto teacher = ce.take_teacher();
  teacher->set_trace(nullptr);
  return std::move(*teacher);
}

// ---------------------------------------------------------------------------
// Run directory

namespace {

void write_predictions(const ValPredictions& p, const fs::path& dir, int k) {
  json dets = json::array();
  for (const auto& [id, d] : p.detections) dets.push_back(json{{"sample_id", id}, {"detections", d}});
  write_json_file(dets, dir / ("iter_" + std::to_string(k) + "_detections.json"));
  std::string lines;
  for (const auto& [id, g] : p.reports) {
    lines += json{{"sample_id", id}, {"report", detokenize(g.report)}, {"category_probs", g.category_probs}}.dump() +
             "\n";
  }
  write_text_file(lines, dir / ("iter_" + std::to_string(k) + "_reports.jsonl"));
}

std::string summary_markdown(const CoEvoConfig& config, const std::vector<IterationLog>& log,
                             const std::string& digest) {
  std::string out = "# Co-evolution run\n\n";
  out += "seed " + std::to_string(config.seed) + ", " + std::to_string(config.iterations) + " iterations x " +
         std::to_string(config.epochs_per_iteration) + " epochs, tau " + threshold_label(config.tau) +
         (config.semi_oracle ? ", semi-oracle" : "") + "\n\n";
  out += "| iteration |";
  std::string rule = "|---|";
  for (const double t : config.thresholds) {
    out += " mAP@" + threshold_label(t) + " |";
    rule += "---|";
  }
  out += " BLEU-4 | ROUGE-L | AUC | PL precision | PL recall | student skill |\n";
  out += rule + "---|---|---|---|---|---|\n";
  for (const auto& l : log) {
    out += "| " + std::to_string(l.iteration) + " |";
    for (const double m : l.det.map) out += " " + fixed(100.0 * m, 2) + " |";
    out += " " + fixed(l.rep.bleu4, 3) + " | " + fixed(l.rep.rouge_l, 3) + " | " +
           (l.rep.auc ? fixed(*l.rep.auc, 3) : std::string("n/a")) + " | " + fixed(l.quality.gip.precision(), 3) +
           " | " + fixed(l.quality.gip.recall(), 3) + " | " + fixed(l.student_skill, 3) + " |\n";
  }
  out += "\ntrace digest: `" + digest + "`\n";
  return out;
}

}  // namespace

RunOutcome run_coevolution(const CoEvoConfig& config, const fs::path& out_dir, const RunOptions& options) {
  config.validate();
  const std::string started = iso_now();
  fs::create_directories(out_dir / "predictions");
  const fs::path ckpt_path = out_dir / "checkpoint.json";

  CoEvolution ce(config, prepare_data(config));
  ce.set_interrupt_flag(options.interrupt);
  RunOutcome outcome;

  try {
    if (options.resume) {
      if (!fs::exists(ckpt_path)) throw Error(ErrorKind::kConfig, "no checkpoint in " + out_dir.string());
      ce.restore(read_json_file(ckpt_path));
      spdlog::info("resuming after iteration {}", ce.log().size());
    } else {
      ce.bootstrap();
      write_json_file(ce.checkpoint(), ckpt_path);
    }
    while (!ce.done()) {
      ce.run_iteration();
      write_predictions(ce.last_predictions(), out_dir / "predictions", ce.log().back().iteration);
      write_json_file(ce.checkpoint(), ckpt_path);
    }
  } catch (const Interrupted&) {
    spdlog::warn("interrupted; checkpoint kept at {}", ckpt_path.string());
    outcome.log = ce.log();
    return outcome;
  }

  outcome.completed = true;
  outcome.log = ce.log();
  outcome.trace_digest = ce.trace().digest();

  json log = json::array();
  for (const auto& l : outcome.log) log.push_back(to_json_value(l));
  write_json_file(json{{"config", config_to_json(config)}, {"log", log}}, out_dir / "metrics.json");
  write_text_file(early_metrics_curves(outcome.log, config.thresholds), out_dir / "metrics.csv");
  write_text_file(summary_markdown(config, outcome.log, outcome.trace_digest), out_dir / "summary.md");
  write_text_file(outcome.trace_digest + "\n", out_dir / "trace_digest.txt");

  json files = json::array();
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(out_dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    files.push_back(json{{"path", fs::relative(p, out_dir).generic_string()}, {"sha256", sha256_file(p)}});
  }
  write_json_file(json{{"version", COEDG_VERSION},
                       {"config", config_to_json(config)},
                       {"seeds", {config.seed}},
                       {"started", started},
                       {"finished", iso_now()},
                       {"resumed", options.resume},
                       {"files", files}},
                  out_dir / "manifest.json");
  return outcome;
}

std::vector<SweepRow> sweep_tau(const CoEvoConfig& config, const std::vector<double>& taus) {
  if (taus.empty()) throw Error(ErrorKind::kConfig, "tau grid must not be empty");
  const RunData data = prepare_data(config);
  std::vector<SweepRow> rows;
  for (const double tau : taus) {
    CoEvoConfig c = config;
    c.tau = tau;
    CoEvolution ce(c, data);
    ce.bootstrap();
    while (!ce.done()) ce.run_iteration();
    rows.push_back({tau, ce.log().back().det.map});
    spdlog::info("tau {}: done", threshold_label(tau));
  }
  return rows;
}

std::string sweep_markdown(const std::vector<SweepRow>& rows, const std::vector<double>& thresholds) {
  std::string out = "| tau |";
  std::string rule = "|---|";
  for (const double t : thresholds) {
    out += " mAP@" + threshold_label(t) + " |";
    rule += "---|";
  }
  out += "\n" + rule + "\n";
  for (const auto& r : rows) {
    out += "| " + threshold_label(r.tau) + " |";
    for (const double m : r.map) out += " " + fixed(100.0 * m, 2) + " |";
    out += "\n";
  }
  return out;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, const std::vector<double>& thresholds) {
  std::string out = "tau";
  for (const double t : thresholds) out += ",map@" + threshold_label(t);
  out += "\n";
  for (const auto& r : rows) {
    out += threshold_label(r.tau);
    for (const double m : r.map) out += "," + fixed(m, 6);
    out += "\n";
  }
  return out;
}

}  // namespace coedg
