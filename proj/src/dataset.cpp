#include "coedg/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "coedg/error.hpp"
#include "coedg/json_io.hpp"
#include "coedg/rng.hpp"

namespace coedg {

CategoryTable::CategoryTable(std::vector<std::string> names) : names_(std::move(names)) {
  std::set<std::string> seen{"background"};
  for (const auto& n : names_) {
    if (n.empty()) throw Error(ErrorKind::kConfig, "empty category name");
    if (!seen.insert(n).second) throw Error(ErrorKind::kConfig, "duplicate category name '" + n + "'");
  }
}

const std::string& CategoryTable::name(CategoryId id) const {
  static const std::string kBackgroundName = "background";
  if (id == kBackground) return kBackgroundName;
  if (!contains(id)) throw Error(ErrorKind::kInvalidArgument, "unknown category " + std::to_string(id));
  return names_[static_cast<std::size_t>(id - 1)];
}

std::optional<CategoryId> CategoryTable::find(const std::string& name) const {
  if (name == "background") return kBackground;
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<CategoryId>(it - names_.begin()) + 1;
}

CategoryTable CategoryTable::chest_xray8() {
  return CategoryTable({"atelectasis", "cardiomegaly", "consolidation", "edema", "lung opacity",
                        "pleural effusion", "pneumonia", "pneumothorax"});
}

namespace {

bool box_in_image(const BBox& b, double w, double h) {
  return b.valid() && b.x1 <= w && b.y1 <= h;
}

std::vector<GroundTruthBox> parse_annotations(const json& arr, const std::string& sample_id,
                                              double w, double h, const CategoryTable* table) {
  std::vector<GroundTruthBox> out;
  for (const auto& a : arr) {
    auto g = a.get<GroundTruthBox>();
    if (table != nullptr && (g.category == kBackground || !table->contains(g.category))) {
      throw Error(ErrorKind::kParse, "sample " + sample_id + ": unknown category " +
                                         std::to_string(g.category));
    }
    if (!box_in_image(g.box, w, h)) {
      throw Error(ErrorKind::kParse, "sample " + sample_id + ": annotation box out of image bounds");
    }
    out.push_back(g);
  }
  return out;
}

struct BoxRecord {
  double width = 0, height = 0;
  std::vector<GroundTruthBox> boxes;
};

std::map<std::string, BoxRecord> read_box_records(const std::filesystem::path& path,
                                                  const CategoryTable* table,
                                                  std::vector<std::string>* order = nullptr) {
  const json doc = read_json_file(path);
  if (!doc.is_array()) throw Error(ErrorKind::kParse, path.string() + ": expected a JSON array");
  std::map<std::string, BoxRecord> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& rec = doc[i];
    try {
      const auto id = rec.at("sample_id").get<std::string>();
      BoxRecord r;
      r.width = rec.at("width").get<double>();
      r.height = rec.at("height").get<double>();
      if (!(r.width > 0 && r.height > 0)) throw Error(ErrorKind::kParse, "non-positive image size");
      r.boxes = parse_annotations(rec.value("annotations", json::array()), id, r.width, r.height, table);
      if (!out.emplace(id, std::move(r)).second) {
        throw Error(ErrorKind::kParse, "duplicate sample_id '" + id + "'");
      }
      if (order != nullptr) order->push_back(id);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse, path.string() + ": record " + std::to_string(i) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, path.string() + ": record " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

json box_record(const Sample& s, const std::vector<GroundTruthBox>& boxes) {
  return json{{"sample_id", s.id}, {"width", s.width}, {"height", s.height}, {"annotations", boxes}};
}

}  // namespace

std::vector<Sample> load_dataset(const std::filesystem::path& annotation_file,
                                 const std::filesystem::path& report_file,
                                 const CategoryTable& categories, const LoadOptions& options) {
  const auto boxes = read_box_records(annotation_file, &categories);

  std::ifstream in(report_file);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open " + report_file.string());
  std::vector<Sample> out;
  std::set<std::string> seen;
  std::string line;
  for (int line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = report_file.string() + ":" + std::to_string(line_no);
    try {
      const json rec = json::parse(line);
      Sample s;
      s.id = rec.at("sample_id").get<std::string>();
      s.report = tokenize(rec.at("report").get<std::string>());
      if (!seen.insert(s.id).second) throw Error(ErrorKind::kParse, "duplicate sample_id '" + s.id + "'");
      auto it = boxes.find(s.id);
      if (it != boxes.end()) {
        s.width = it->second.width;
        s.height = it->second.height;
        s.annotations = it->second.boxes;
      } else {
        if (!rec.contains("width") || !rec.contains("height")) {
          throw Error(ErrorKind::kParse, "weakly labeled sample '" + s.id + "' needs width and height");
        }
        s.width = rec["width"].get<double>();
        s.height = rec["height"].get<double>();
        if (!(s.width > 0 && s.height > 0)) throw Error(ErrorKind::kParse, "non-positive image size");
      }
      if (!options.sample_filter || options.sample_filter(s)) out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse, where + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::kParse, where + ": " + e.what());
    }
  }
  if (seen.empty()) throw Error(ErrorKind::kParse, report_file.string() + ": no reports");
  for (const auto& [id, rec] : boxes) {
    if (!seen.count(id)) {
      throw Error(ErrorKind::kParse, annotation_file.string() + ": annotated sample '" + id + "' has no report");
    }
  }
  return out;
}

void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& annotation_file,
                  const std::filesystem::path& report_file) {
  json ann = json::array();
  std::ostringstream reports;
  for (const auto& s : samples) {
    if (s.labeled()) ann.push_back(box_record(s, *s.annotations));
    json rec{{"sample_id", s.id}, {"report", detokenize(s.report)}, {"width", s.width}, {"height", s.height}};
    reports << rec.dump() << "\n";
  }
  write_json_file(ann, annotation_file);
  write_text_file(reports.str(), report_file);
}

CategoryTable load_categories(const std::filesystem::path& path) {
  const json doc = read_json_file(path);
  auto names = doc.get<std::vector<std::string>>();
  if (names.empty() || names.front() != "background") {
    throw Error(ErrorKind::kParse, path.string() + ": first category must be 'background'");
  }
  names.erase(names.begin());
  return CategoryTable(std::move(names));
}

void save_categories(const CategoryTable& table, const std::filesystem::path& path) {
  std::vector<std::string> names{"background"};
  names.insert(names.end(), table.names().begin(), table.names().end());
  write_json_file(json(names), path);
}

GroundTruthMap load_ground_truth(const std::filesystem::path& path) {
  GroundTruthMap out;
  for (auto& [id, rec] : read_box_records(path, nullptr)) out[id] = std::move(rec.boxes);
  return out;
}

void save_ground_truth(const GroundTruthMap& gt, const std::vector<Sample>& samples,
                       const std::filesystem::path& path) {
  json arr = json::array();
  for (const auto& s : samples) {
    auto it = gt.find(s.id);
    arr.push_back(box_record(s, it == gt.end() ? std::vector<GroundTruthBox>{} : it->second));
  }
  write_json_file(arr, path);
}

std::vector<Sample> samples_from_coco(const std::string& coco_json, const CategoryTable& categories) {
  json doc;
  try {
    doc = json::parse(coco_json);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kParse, std::string("COCO: ") + e.what());
  }
  std::map<long, CategoryId> cat_map;
  for (const auto& c : doc.at("categories")) {
    const auto name = c.at("name").get<std::string>();
    auto id = categories.find(name);
    if (!id) throw Error(ErrorKind::kParse, "COCO category '" + name + "' not in the category table");
    cat_map[c.at("id").get<long>()] = *id;
  }
  std::vector<Sample> out;
  std::map<long, std::size_t> by_image;
  for (const auto& im : doc.at("images")) {
    Sample s;
    const long id = im.at("id").get<long>();
    s.id = im.contains("file_name") ? std::filesystem::path(im["file_name"].get<std::string>()).stem().string()
                                    : std::to_string(id);
    s.width = im.at("width").get<double>();
    s.height = im.at("height").get<double>();
    s.annotations.emplace();
    by_image[id] = out.size();
    out.push_back(std::move(s));
  }
  for (const auto& a : doc.value("annotations", json::array())) {
    auto it = by_image.find(a.at("image_id").get<long>());
    if (it == by_image.end()) throw Error(ErrorKind::kParse, "COCO annotation refers to an unknown image");
    auto cat = cat_map.find(a.at("category_id").get<long>());
    if (cat == cat_map.end()) throw Error(ErrorKind::kParse, "COCO annotation has an unknown category");
    const auto bbox = a.at("bbox").get<std::vector<double>>();
    if (bbox.size() != 4) throw Error(ErrorKind::kParse, "COCO bbox must have 4 numbers");
    auto& s = out[it->second];
    const BBox b{bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]};
    if (!box_in_image(b, s.width, s.height)) {
      throw Error(ErrorKind::kParse, "sample " + s.id + ": annotation box out of image bounds");
    }
    s.annotations->push_back({cat->second, b});
  }
  return out;
}

std::array<std::size_t, 3> split_quotas(std::size_t n) {
  constexpr std::array<std::size_t, 3> kWeights{7, 1, 2};
  std::array<std::size_t, 3> quota{};
  std::array<std::size_t, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    quota[i] = n * kWeights[i] / 10;
    rem[i] = n * kWeights[i] % 10;
    assigned += quota[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++quota[order[k]];
  return quota;
}

Split split(const std::vector<Sample>& samples, std::uint64_t seed) {
  Split out;
  for (const bool labeled : {true, false}) {
    std::vector<const Sample*> pool;
    for (const auto& s : samples) {
      if (s.labeled() == labeled) pool.push_back(&s);
    }
    Rng rng(derive_seed(seed, {fnv1a("split"), labeled ? 1ULL : 0ULL}));
    rng.shuffle(pool);
    const auto q = split_quotas(pool.size());
    std::size_t i = 0;
    for (; i < q[0]; ++i) out.train.push_back(*pool[i]);
    for (; i < q[0] + q[1]; ++i) out.val.push_back(*pool[i]);
    for (; i < pool.size(); ++i) out.test.push_back(*pool[i]);
  }
  return out;
}

BatchSampler::BatchSampler(std::vector<std::string> labeled, std::vector<std::string> weak,
                           int batch_size, BatchRatio ratio, std::uint64_t seed)
    : labeled_(std::move(labeled)), weak_(std::move(weak)), batch_size_(batch_size), ratio_(ratio), seed_(seed) {
  const int parts = ratio_.labeled + ratio_.weak;
  if (ratio_.labeled < 0 || ratio_.weak < 0 || parts == 0) {
    throw Error(ErrorKind::kConfig, "batch ratio must be non-negative with a positive sum");
  }
  if (batch_size_ <= 0 || batch_size_ % parts != 0) {
    throw Error(ErrorKind::kConfig, "batch size " + std::to_string(batch_size_) +
                                        " is not divisible by the ratio sum " + std::to_string(parts));
  }
  if (ratio_.labeled > 0 && labeled_.empty()) throw Error(ErrorKind::kConfig, "empty pool: no labeled samples");
  if (ratio_.weak > 0 && weak_.empty()) throw Error(ErrorKind::kConfig, "empty pool: no weakly labeled samples");
}

std::vector<Batch> BatchSampler::epoch(int index) const {
  const int parts = ratio_.labeled + ratio_.weak;
  const auto e = static_cast<std::uint64_t>(index);
  std::vector<Batch> out;

  if (ratio_.weak == 0) {
    auto order = labeled_;
    Rng(derive_seed(seed_, {fnv1a("labeled-only"), e})).shuffle(order);
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size_)) {
      Batch b;
      const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size_));
      b.labeled_ids.assign(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(end));
      out.push_back(std::move(b));
    }
    return out;
  }

  const std::size_t weak_per = static_cast<std::size_t>(batch_size_ / parts * ratio_.weak);
  const std::size_t labeled_per = static_cast<std::size_t>(batch_size_ / parts * ratio_.labeled);
  auto weak = weak_;
  Rng(derive_seed(seed_, {fnv1a("weak"), e})).shuffle(weak);

  // Labeled ids come from successive reshuffled passes over the pool.
  std::vector<std::string> pass;
  std::size_t pos = 0;
  std::uint64_t pass_no = 0;
  auto next_labeled = [&]() -> const std::string& {
    if (pos == pass.size()) {
      pass = labeled_;
      Rng(derive_seed(seed_, {fnv1a("labeled"), e, pass_no++})).shuffle(pass);
      pos = 0;
    }
    return pass[pos++];
  };

  for (std::size_t i = 0; i < weak.size(); i += weak_per) {
    Batch b;
    const auto end = std::min(weak.size(), i + weak_per);
    b.weak_ids.assign(weak.begin() + static_cast<long>(i), weak.begin() + static_cast<long>(end));
    const std::size_t n_weak = end - i;
    const std::size_t n_labeled =
        n_weak == weak_per ? labeled_per
                           : (n_weak * static_cast<std::size_t>(ratio_.labeled) + ratio_.weak - 1) /
                                 static_cast<std::size_t>(ratio_.weak);
    for (std::size_t k = 0; k < n_labeled; ++k) b.labeled_ids.push_back(next_labeled());
    out.push_back(std::move(b));
  }
  return out;
}

Tokens tokenize(const std::string& text) {
  std::string spaced;
  spaced.reserve(text.size() * 2);
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c)) {
      spaced += ' ';
      spaced += ch;
      spaced += ' ';
    } else {
      spaced += static_cast<char>(std::tolower(c));
    }
  }
  Tokens out;
  std::istringstream in(spaced);
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

std::string detokenize(const Tokens& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

Vocabulary Vocabulary::build(const std::vector<Tokens>& corpus, int min_frequency) {
  std::map<std::string, int> counts;
  for (const auto& doc : corpus) {
    for (const auto& t : doc) ++counts[t];
  }
  Vocabulary v;
  for (const auto& [tok, n] : counts) {
    if (n >= min_frequency) v.words_.emplace(tok, n);
  }
  v.words_.emplace(kUnknown, 0);
  return v;
}

Tokens Vocabulary::encode(const Tokens& tokens) const {
  Tokens out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(contains(t) ? t : kUnknown);
  return out;
}

Tokens category_sentence(const CategoryTable& table, CategoryId c, int variant) {
  const std::string& name = table.name(c);
  switch (variant % kSentenceVariants) {
    case 1: return tokenize(name + " is present .");
    case 2: return tokenize("findings consistent with " + name + " .");
    default: return tokenize("there is " + name + " .");
  }
}

Tokens normal_sentence() { return {"no", "acute", "findings", "."}; }

namespace {

double frac(double x) { return x - std::floor(x); }

// Category-conditioned box around a per-category anchor.
BBox synth_box(CategoryId c, double w, double h, Rng& rng) {
  const double cx = (0.2 + 0.6 * frac(c * 0.6180339887)) * w + rng.normal() * 0.06 * w;
  const double cy = (0.25 + 0.5 * frac(c * 0.4142135624)) * h + rng.normal() * 0.06 * h;
  const double scale = (0.08 + 0.04 * (c % 4)) * (0.7 + 0.6 * rng.uniform());
  const double bw = std::max(8.0, scale * w);
  const double bh = std::max(8.0, scale * h * (0.8 + 0.4 * rng.uniform()));
  const double x0 = std::clamp(std::round(cx - bw / 2), 0.0, w - bw);
  const double y0 = std::clamp(std::round(cy - bh / 2), 0.0, h - bh);
  return {x0, y0, std::round(x0 + bw), std::round(y0 + bh)};
}

}  // namespace

SynthDataset synth_dataset(const SynthConfig& config, std::uint64_t seed) {
  if (config.n_samples < 0 || config.n_categories < 1 || config.image_dims.empty() ||
      config.boxes_per_image.empty() || config.boxes_per_image.size() > 6 ||
      config.labeled_fraction < 0 || config.labeled_fraction > 1) {
    throw Error(ErrorKind::kConfig, "invalid synthetic dataset config");
  }
  SynthDataset out;
  if (config.n_categories == 8) {
    out.categories = CategoryTable::chest_xray8();
  } else {
    std::vector<std::string> names;
    for (int c = 1; c <= config.n_categories; ++c) names.push_back("finding " + std::to_string(c));
    out.categories = CategoryTable(std::move(names));
  }

  Rng rng(derive_seed(seed, {fnv1a("synth")}));
  double mass = 0;
  for (const double p : config.boxes_per_image) mass += p;

  for (int i = 0; i < config.n_samples; ++i) {
    Sample s;
    char id[16];
    std::snprintf(id, sizeof id, "s%05d", i);
    s.id = id;
    const auto& dims = config.image_dims[rng.index(config.image_dims.size())];
    s.width = dims.first;
    s.height = dims.second;

    double u = rng.uniform() * mass;
    std::size_t n_boxes = 0;
    while (n_boxes + 1 < config.boxes_per_image.size() && u >= config.boxes_per_image[n_boxes]) {
      u -= config.boxes_per_image[n_boxes];
      ++n_boxes;
    }
    std::vector<GroundTruthBox> boxes;
    std::vector<CategoryId> mentioned;
    for (std::size_t b = 0; b < n_boxes; ++b) {
      const auto c = static_cast<CategoryId>(1 + rng.index(static_cast<std::uint64_t>(config.n_categories)));
      boxes.push_back({c, synth_box(c, s.width, s.height, rng)});
      if (std::find(mentioned.begin(), mentioned.end(), c) == mentioned.end()) mentioned.push_back(c);
    }
    for (const CategoryId c : mentioned) {
      const auto sentence = category_sentence(out.categories, c, static_cast<int>(rng.index(kSentenceVariants)));
      s.report.insert(s.report.end(), sentence.begin(), sentence.end());
    }
    if (mentioned.empty()) {
      if (rng.uniform() < 0.5) {
        const Tokens clear{"the", "lungs", "are", "clear", "."};
        s.report.insert(s.report.end(), clear.begin(), clear.end());
      }
      const auto normal = normal_sentence();
      s.report.insert(s.report.end(), normal.begin(), normal.end());
    }
    out.ground_truth[s.id] = boxes;
    out.samples.push_back(std::move(s));
  }

  std::vector<std::size_t> order(out.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto n_labeled =
      static_cast<std::size_t>(std::floor(config.labeled_fraction * config.n_samples + 0.5));
  for (std::size_t k = 0; k < n_labeled && k < order.size(); ++k) {
    auto& s = out.samples[order[k]];
    s.annotations = out.ground_truth[s.id];
  }
  return out;
}

void write_dataset_dir(const SynthDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_dataset(data.samples, dir / "annotations.json", dir / "reports.jsonl");
  save_ground_truth(data.ground_truth, data.samples, dir / "ground_truth.json");
  save_categories(data.categories, dir / "categories.json");
}

SynthDataset read_dataset_dir(const std::filesystem::path& dir, const LoadOptions& options) {
  SynthDataset out;
  out.categories = load_categories(dir / "categories.json");
  out.samples = load_dataset(dir / "annotations.json", dir / "reports.jsonl", out.categories, options);
  if (std::filesystem::exists(dir / "ground_truth.json")) {
    out.ground_truth = load_ground_truth(dir / "ground_truth.json");
  }
  return out;
}

}  // namespace coedg
