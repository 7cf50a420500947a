#include "coedg/json_io.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "coedg/error.hpp"

namespace coedg {

void to_json(json& j, const BBox& b) {
  j = json{{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}};
}

void from_json(const json& j, BBox& b) {
  b.x0 = j.at("x0").get<double>();
  b.y0 = j.at("y0").get<double>();
  b.x1 = j.at("x1").get<double>();
  b.y1 = j.at("y1").get<double>();
}

void to_json(json& j, const Detection& d) {
  j = json{{"category", d.category}, {"x0", d.box.x0}, {"y0", d.box.y0}, {"x1", d.box.x1},
           {"y1", d.box.y1},         {"score", d.score}, {"source", std::string(to_string(d.source))}};
  if (d.merged) j["merged"] = true;
}

void from_json(const json& j, Detection& d) {
  d.category = j.at("category").get<int>();
  from_json(j, d.box);
  d.score = j.value("score", 1.0);
  d.source = source_from_string(j.value("source", std::string("student")));
  d.merged = j.value("merged", false);
  if (!(d.score >= 0.0 && d.score <= 1.0)) throw Error(ErrorKind::kParse, "detection score outside [0, 1]");
}

void to_json(json& j, const GroundTruthBox& g) {
  j = json{{"category", g.category}, {"x0", g.box.x0}, {"y0", g.box.y0}, {"x1", g.box.x1}, {"y1", g.box.y1}};
}

void from_json(const json& j, GroundTruthBox& g) {
  g.category = j.at("category").get<int>();
  from_json(j, g.box);
}

void to_json(json& j, const LocationEmbedding& l) { j = json::array({l.q0, l.q1, l.q2, l.q3}); }

void from_json(const json& j, LocationEmbedding& l) {
  if (!j.is_array() || j.size() != 4) throw Error(ErrorKind::kParse, "location must be 4 integers");
  l = {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

void to_json(json& j, const DipSlot& s) {
  if (s.kind == SlotKind::kNull) {
    j = json{{"kind", "null"}};
    return;
  }
  j = json{{"kind", "abnormality"}};
  if (s.crop) j["crop"] = *s.crop;
  if (s.location) j["location"] = *s.location;
  if (s.category) j["category"] = *s.category;
}

void from_json(const json& j, DipSlot& s) {
  const auto kind = j.at("kind").get<std::string>();
  s = DipSlot{};
  if (kind == "null") return;
  if (kind != "abnormality") throw Error(ErrorKind::kParse, "unknown slot kind '" + kind + "'");
  s.kind = SlotKind::kAbnormality;
  if (j.contains("crop")) s.crop = j["crop"].get<BBox>();
  if (j.contains("location")) s.location = j["location"].get<LocationEmbedding>();
  if (j.contains("category")) s.category = j["category"].get<int>();
}

void to_json(json& j, const DipInput& d) {
  j = json{{"sample_id", d.sample_id},
           {"class_token", d.has_class_token},
           {"width", d.width},
           {"height", d.height},
           {"slots", d.slots}};
}

void from_json(const json& j, DipInput& d) {
  d.sample_id = j.at("sample_id").get<std::string>();
  d.has_class_token = j.value("class_token", true);
  d.width = j.at("width").get<double>();
  d.height = j.at("height").get<double>();
  d.slots = j.at("slots").get<std::vector<DipSlot>>();
}

void to_json(json& j, const ClassificationTarget& t) {
  j = json{{"sample_id", t.sample_id}, {"multi_hot", t.multi_hot}};
}

void from_json(const json& j, ClassificationTarget& t) {
  t.sample_id = j.at("sample_id").get<std::string>();
  t.multi_hot = j.at("multi_hot").get<std::vector<int>>();
}

void to_json(json& j, const StageCounts& c) {
  j = json{{"raw_teacher", c.raw_teacher},
           {"raw_student", c.raw_student},
           {"after_threshold", c.after_threshold},
           {"after_sa_nms", c.after_sa_nms},
           {"after_gip", c.after_gip}};
}

void from_json(const json& j, StageCounts& c) {
  c.raw_teacher = j.at("raw_teacher").get<int>();
  c.raw_student = j.at("raw_student").get<int>();
  c.after_threshold = j.at("after_threshold").get<int>();
  c.after_sa_nms = j.at("after_sa_nms").get<int>();
  c.after_gip = j.at("after_gip").get<int>();
}

void to_json(json& j, const PseudoLabelSet& p) {
  const auto& c = p.provenance;
  j = json{{"sample_id", p.sample_id},
           {"labels", p.labels},
           {"include_in_unsup_loss", p.include_in_unsup_loss},
           {"provenance", c},
           {"removed",
            {{"threshold", c.raw_teacher + c.raw_student - c.after_threshold},
             {"sa_nms", c.after_threshold - c.after_sa_nms},
             {"gip", c.after_sa_nms - c.after_gip}}}};
}

void from_json(const json& j, PseudoLabelSet& p) {
  p.sample_id = j.at("sample_id").get<std::string>();
  p.labels = j.at("labels").get<std::vector<Detection>>();
  p.include_in_unsup_loss = j.at("include_in_unsup_loss").get<bool>();
  p.provenance = j.at("provenance").get<StageCounts>();
}

void to_json(json& j, const DetEvalResult& r) {
  j = json::object();
  j["thresholds"] = r.thresholds;
  j["map"] = r.map;
  json per = json::array();
  for (const auto& m : r.per_category_ap) {
    json row = json::object();
    for (const auto& [c, ap] : m) row[std::to_string(c)] = ap;
    per.push_back(row);
  }
  j["per_category_ap"] = per;
}

void to_json(json& j, const RepEvalResult& r) {
  j = json{{"bleu1", r.bleu1}, {"bleu2", r.bleu2}, {"bleu3", r.bleu3},
           {"bleu4", r.bleu4}, {"rouge_l", r.rouge_l}};
  j["auc"] = r.auc ? json(*r.auc) : json(nullptr);
  j["wilcoxon_p"] = r.wilcoxon_p ? json(*r.wilcoxon_p) : json(nullptr);
}

void from_json(const json& j, DetEvalResult& r) {
  r.thresholds = j.at("thresholds").get<std::vector<double>>();
  r.map = j.at("map").get<std::vector<double>>();
  r.per_category_ap.clear();
  for (const auto& row : j.value("per_category_ap", json::array())) {
    std::map<CategoryId, double> m;
    for (const auto& [k, v] : row.items()) m[std::stoi(k)] = v.get<double>();
    r.per_category_ap.push_back(std::move(m));
  }
}

void from_json(const json& j, RepEvalResult& r) {
  r.bleu1 = j.at("bleu1").get<double>();
  r.bleu2 = j.at("bleu2").get<double>();
  r.bleu3 = j.at("bleu3").get<double>();
  r.bleu4 = j.at("bleu4").get<double>();
  r.rouge_l = j.at("rouge_l").get<double>();
  r.auc.reset();
  r.wilcoxon_p.reset();
  if (j.contains("auc") && !j["auc"].is_null()) r.auc = j["auc"].get<double>();
  if (j.contains("wilcoxon_p") && !j["wilcoxon_p"].is_null()) r.wilcoxon_p = j["wilcoxon_p"].get<double>();
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kParse, path.string() + ": " + e.what());
  }
}

void write_text_file(const std::string& text, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kConfig, "cannot write " + path.string());
  out << text;
}

void write_json_file(const json& j, const std::filesystem::path& path, int indent) {
  write_text_file(j.dump(indent) + "\n", path);
}

std::string sha256_hex(const std::string& data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::kInternal, "SHA-256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kConfig, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return sha256_hex(buf.str());
}

}  // namespace coedg
