#include "coedg/simulator.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "coedg/error.hpp"
#include "coedg/losses.hpp"
#include "coedg/rng.hpp"

namespace coedg::sim {

void to_json(json& j, const DetectorKnobs& k) {
  j = json{{"jitter_sigma", k.jitter_sigma},
           {"drop_prob", k.drop_prob},
           {"fp_rate", k.fp_rate},
           {"tp_score_spread", k.tp_score_spread},
           {"fp_score_spread", k.fp_score_spread},
           {"initial_skill", k.initial_skill},
           {"max_skill", k.max_skill},
           {"learning_rate", k.learning_rate},
           {"volume_half", k.volume_half},
           {"precision_exponent", k.precision_exponent},
           {"oracle", k.oracle}};
}

void from_json(const json& j, DetectorKnobs& k) {
  const DetectorKnobs d;
  k.jitter_sigma = j.value("jitter_sigma", d.jitter_sigma);
  k.drop_prob = j.value("drop_prob", d.drop_prob);
  k.fp_rate = j.value("fp_rate", d.fp_rate);
  k.tp_score_spread = j.value("tp_score_spread", d.tp_score_spread);
  k.fp_score_spread = j.value("fp_score_spread", d.fp_score_spread);
  k.initial_skill = j.value("initial_skill", d.initial_skill);
  k.max_skill = j.value("max_skill", d.max_skill);
  k.learning_rate = j.value("learning_rate", d.learning_rate);
  k.volume_half = j.value("volume_half", d.volume_half);
  k.precision_exponent = j.value("precision_exponent", d.precision_exponent);
  k.oracle = j.value("oracle", d.oracle);
}

void to_json(json& j, const GeneratorKnobs& k) {
  j = json{{"recall", k.recall},
           {"precision", k.precision},
           {"initial_skill", k.initial_skill},
           {"max_skill", k.max_skill},
           {"learning_rate", k.learning_rate},
           {"volume_half", k.volume_half},
           {"detector_support", k.detector_support},
           {"fooled_rate", k.fooled_rate},
           {"spurious_rate", k.spurious_rate},
           {"oracle", k.oracle}};
}

void from_json(const json& j, GeneratorKnobs& k) {
  const GeneratorKnobs d;
  k.recall = j.value("recall", d.recall);
  k.precision = j.value("precision", d.precision);
  k.initial_skill = j.value("initial_skill", d.initial_skill);
  k.max_skill = j.value("max_skill", d.max_skill);
  k.learning_rate = j.value("learning_rate", d.learning_rate);
  k.volume_half = j.value("volume_half", d.volume_half);
  k.detector_support = j.value("detector_support", d.detector_support);
  k.fooled_rate = j.value("fooled_rate", d.fooled_rate);
  k.spurious_rate = j.value("spurious_rate", d.spurious_rate);
  k.oracle = j.value("oracle", d.oracle);
}

std::set<CategoryId> ImageTruth::categories() const {
  std::set<CategoryId> out;
  for (const auto& b : boxes) out.insert(b.category);
  return out;
}

json truth_to_json(const TruthTable& truth) {
  json arr = json::array();
  for (const auto& [id, t] : truth) {
    arr.push_back(json{{"sample_id", id}, {"width", t.width}, {"height", t.height}, {"annotations", t.boxes}});
  }
  return arr;
}

TruthTable truth_from_json(const json& records) {
  TruthTable out;
  for (const auto& r : records) {
    ImageTruth t;
    t.width = r.at("width").get<double>();
    t.height = r.at("height").get<double>();
    t.boxes = r.value("annotations", json::array()).get<std::vector<GroundTruthBox>>();
    out[r.at("sample_id").get<std::string>()] = std::move(t);
  }
  return out;
}

TruthTable truth_from_samples(const std::vector<Sample>& samples, const GroundTruthMap& gt) {
  TruthTable out;
  for (const auto& s : samples) {
    ImageTruth t{s.width, s.height, {}};
    if (auto it = gt.find(s.id); it != gt.end()) {
      t.boxes = it->second;
    } else if (s.annotations) {
      t.boxes = *s.annotations;
    }
    out[s.id] = std::move(t);
  }
  return out;
}

json state_to_json(const AdapterStateRecord& s) {
  return json{{"role", s.role}, {"seed", s.seed}, {"skill", s.skill}, {"version", s.version}};
}

AdapterStateRecord state_from_json(const json& j) {
  return {j.at("role").get<std::string>(), j.at("seed").get<std::uint64_t>(), j.at("skill").get<double>(),
          j.at("version").get<std::int64_t>()};
}

std::string state_digest(const AdapterStateRecord& s) { return sha256_hex(state_to_json(s).dump()); }

namespace {

// Orders and clamps one axis so that 0 <= lo < hi <= extent.
std::pair<double, double> clamp_axis(double a, double b, double extent) {
  const double lo = std::clamp(std::min(a, b), 0.0, extent - 1.0);
  const double hi = std::clamp(std::max(a, b), lo + 1.0, extent);
  return {lo, hi};
}

double advance(double skill, double target, double rate) { return skill + rate * (target - skill); }

}  // namespace

SimDetector::SimDetector(std::uint64_t seed, int num_categories, DetectorKnobs knobs, TruthTable truth)
    : num_categories_(num_categories), knobs_(knobs), truth_(std::move(truth)) {
  reinit(seed);
}

void SimDetector::reinit(std::uint64_t seed) {
  state_ = {"detector", seed, knobs_.initial_skill, 0};
}

const ImageTruth& SimDetector::truth(const std::string& sample_id) const {
  auto it = truth_.find(sample_id);
  if (it == truth_.end()) throw Error(ErrorKind::kInvalidArgument, "unknown sample '" + sample_id + "'");
  return it->second;
}

std::vector<Detection> SimDetector::detect(const std::string& sample_id) const {
  const auto& t = truth(sample_id);
  Rng rng(derive_seed(state_.seed, {kDetectStream, fnv1a(sample_id), static_cast<std::uint64_t>(state_.version)}));
  const double noise = 1.0 - state_.skill;
  const double sigma = knobs_.jitter_sigma * noise;

  std::vector<Detection> out;
  for (const auto& g : t.boxes) {
    const double u_drop = rng.uniform();
    const double j0 = rng.normal();
    const double j1 = rng.normal();
    const double j2 = rng.normal();
    const double j3 = rng.normal();
    const double u_score = rng.uniform();
    if (u_drop < knobs_.drop_prob * noise) continue;
    const auto [x0, x1] = clamp_axis(g.box.x0 + j0 * sigma, g.box.x1 + j2 * sigma, t.width);
    const auto [y0, y1] = clamp_axis(g.box.y0 + j1 * sigma, g.box.y1 + j3 * sigma, t.height);
    const double score = std::clamp(1.0 - noise * knobs_.tp_score_spread * u_score, 0.0, 1.0);
    out.push_back({g.category, {x0, y0, x1, y1}, score, Source::kStudent, false});
  }
  // False positives come from their own streams so the k-th one keeps its
  // category and box when the skill changes.
  Rng count_rng(derive_seed(state_.seed, {kFalsePositiveStream, fnv1a(sample_id), static_cast<std::uint64_t>(state_.version), 0}));
  Rng fp_rng(derive_seed(state_.seed, {kFalsePositiveStream, fnv1a(sample_id), static_cast<std::uint64_t>(state_.version), 1}));
  const int n_fp = count_rng.poisson(knobs_.fp_rate * noise);
  for (int k = 0; k < n_fp; ++k) {
    const auto c = static_cast<CategoryId>(1 + fp_rng.index(static_cast<std::uint64_t>(num_categories_)));
    const double bw = (0.1 + 0.3 * fp_rng.uniform()) * t.width;
    const double bh = (0.1 + 0.3 * fp_rng.uniform()) * t.height;
    const double x0 = fp_rng.uniform() * (t.width - bw);
    const double y0 = fp_rng.uniform() * (t.height - bh);
    const double u_score = fp_rng.uniform();
    const double score = std::clamp(1.0 - noise * knobs_.fp_score_spread * u_score, 0.0, 1.0);
    out.push_back({c, {x0, y0, x0 + bw, y0 + bh}, score, Source::kStudent, false});
  }
  return out;
}

namespace {

std::array<double, 4> normalized(const BBox& b, const ImageTruth& t) {
  return {b.x0 / t.width, b.y0 / t.height, b.x1 / t.width, b.y1 / t.height};
}

// Pairs each label with the best same-category own detection.
DetectionLossSample loss_pairs(const std::vector<Detection>& own, const std::vector<Detection>& labels,
                               const ImageTruth& t, bool include) {
  DetectionLossSample out;
  out.include = include;
  std::vector<bool> used(own.size(), false);
  for (const auto& l : labels) {
    if (l.category == kBackground) continue;
    std::size_t best = own.size();
    double best_iou = 0.0;
    for (std::size_t i = 0; i < own.size(); ++i) {
      if (used[i] || own[i].category != l.category) continue;
      const double o = iou(own[i].box, l.box);
      if (o > best_iou) {
        best_iou = o;
        best = i;
      }
    }
    if (best < own.size()) {
      used[best] = true;
      out.classes.push_back({own[best].score, 1});
      out.boxes.push_back({normalized(own[best].box, t), normalized(l.box, t)});
    } else {
      out.classes.push_back({0.0, 1});
    }
  }
  for (std::size_t i = 0; i < own.size(); ++i) {
    if (!used[i]) out.classes.push_back({own[i].score, 0});
  }
  return out;
}

}  // namespace

std::pair<double, int> SimDetector::train_epoch(const json& payload) {
  std::vector<DetectionLossSample> sup;
  std::vector<DetectionLossSample> unsup;
  std::set<std::string> volume;
  long correct = 0;
  long total = 0;
  int seen = 0;

  auto consume = [&](const json& entry, bool weak) {
    const auto id = entry.at("sample_id").get<std::string>();
    const auto labels = entry.value("labels", json::array()).get<std::vector<Detection>>();
    const bool include = !weak || entry.value("include", true);
    const auto& t = truth(id);
    ++seen;
    (weak ? unsup : sup).push_back(loss_pairs(detect(id), labels, t, include));
    if (!include) return;
    const auto present = t.categories();
    for (const auto& l : labels) {
      if (l.category == kBackground) continue;
      ++total;
      if (present.count(l.category)) {
        ++correct;
        volume.insert(id);
      }
    }
  };
  for (const auto& e : payload.value("labeled", json::array())) consume(e, false);
  for (const auto& e : payload.value("weak", json::array())) consume(e, true);

  const double loss = detection_loss(sup, unsup).total.value / std::max(1, seen);

  if (knobs_.oracle) {
    state_.skill = 1.0;
  } else {
    const double q = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    const double v = static_cast<double>(volume.size());
    const double target =
        knobs_.max_skill * (v / (v + knobs_.volume_half)) * std::pow(q, knobs_.precision_exponent);
    state_.skill = advance(state_.skill, target, knobs_.learning_rate);
  }
  ++state_.version;
  return {loss, seen};
}

SimGenerator::SimGenerator(std::uint64_t seed, CategoryTable categories, int embedding_dim,
                           GeneratorKnobs knobs, TruthTable truth)
    : categories_(std::move(categories)), embedding_dim_(embedding_dim), knobs_(knobs), truth_(std::move(truth)) {
  reinit(seed);
}

void SimGenerator::reinit(std::uint64_t seed) {
  state_ = {"generator", seed, knobs_.oracle ? 1.0 : knobs_.initial_skill, 0};
}

Generation SimGenerator::generate(const DipInput& input) const {
  auto it = truth_.find(input.sample_id);
  if (it == truth_.end()) throw Error(ErrorKind::kInvalidArgument, "unknown sample '" + input.sample_id + "'");
  const auto present = it->second.categories();
  std::set<CategoryId> pointed;
  for (const auto& s : input.slots) {
    if (s.kind == SlotKind::kAbnormality && s.category && *s.category != kBackground) pointed.insert(*s.category);
  }

  Rng rng(derive_seed(state_.seed, {kGenerateStream, fnv1a(input.sample_id), static_cast<std::uint64_t>(state_.version)}));
  const double g = state_.skill;
  Generation out;
  for (CategoryId c = 1; c <= categories_.size(); ++c) {
    const double u_keep = rng.uniform();
    const double u_prob = rng.uniform();
    const bool is_true = present.count(c) != 0;
    const bool is_pointed = pointed.count(c) != 0;
    double p = 0.0;
    if (is_true) {
      p = knobs_.recall * (is_pointed ? std::max(g, knobs_.detector_support) : g);
    } else {
      p = (1.0 - knobs_.precision) +
          knobs_.precision * (1.0 - g) * (is_pointed ? knobs_.fooled_rate : knobs_.spurious_rate);
    }
    const bool predicted = u_keep < p;
    if (predicted) {
      out.categories.insert(c);
      out.category_probs.push_back(0.51 + 0.48 * u_prob);
    } else {
      out.category_probs.push_back(0.49 * u_prob * (is_true ? 1.0 : 1.0 - g));
    }
  }
  for (const CategoryId c : out.categories) {
    const auto s = category_sentence(categories_, c, 0);
    out.report.insert(out.report.end(), s.begin(), s.end());
  }
  if (out.categories.empty()) out.report = normal_sentence();
  return out;
}

std::vector<double> SimGenerator::token_probs(const Generation& gen, const Tokens& reference) const {
  const std::set<std::string> produced(gen.report.begin(), gen.report.end());
  std::vector<double> out;
  out.reserve(reference.size());
  for (const auto& tok : reference) {
    out.push_back(produced.count(tok) ? 0.5 + 0.45 * state_.skill : 0.05);
  }
  return out;
}

std::vector<double> SimGenerator::embed(const std::string& sample_id) const {
  Rng rng(derive_seed(state_.seed, {kEmbedStream, fnv1a(sample_id), static_cast<std::uint64_t>(state_.version)}));
  std::vector<double> out(static_cast<std::size_t>(embedding_dim_));
  for (auto& v : out) v = rng.normal();
  return out;
}

std::pair<double, int> SimGenerator::train_epoch(const json& payload) {
  double f1_sum = 0.0;
  double loss_sum = 0.0;
  int n = 0;
  for (const auto& e : payload.value("samples", json::array())) {
    const auto input = e.at("dip_input").get<DipInput>();
    const auto targets = e.at("targets").get<std::vector<int>>();
    const auto reference = e.value("reference", Tokens{});
    auto it = truth_.find(input.sample_id);
    if (it == truth_.end()) throw Error(ErrorKind::kInvalidArgument, "unknown sample '" + input.sample_id + "'");
    const auto present = it->second.categories();

    int hit = 0;
    int claimed = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (!targets[i]) continue;
      ++claimed;
      hit += present.count(static_cast<CategoryId>(i + 1)) != 0;
    }
    const int denom = claimed + static_cast<int>(present.size());
    f1_sum += denom == 0 ? 1.0 : 2.0 * hit / denom;

    const auto gen = generate(input);
    double loss = multilabel_cross_entropy(gen.category_probs, targets).value;
    if (!reference.empty()) loss += report_nll(token_probs(gen, reference)).value;
    loss_sum += loss;
    ++n;
  }
  if (!knobs_.oracle && n > 0) {
    const double q = f1_sum / n;
    const double target = knobs_.max_skill * q * q * (n / (n + knobs_.volume_half));
    state_.skill = advance(state_.skill, target, knobs_.learning_rate);
  }
  ++state_.version;
  return {n > 0 ? loss_sum / n : 0.0, n};
}

}  // namespace coedg::sim
