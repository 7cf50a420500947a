#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "coedg/dip.hpp"
#include "coedg/geometry.hpp"
#include "coedg/metrics.hpp"
#include "coedg/pseudo_label.hpp"

namespace coedg {

using json = nlohmann::json;

void to_json(json& j, const BBox& b);
void from_json(const json& j, BBox& b);
void to_json(json& j, const Detection& d);
void from_json(const json& j, Detection& d);
void to_json(json& j, const GroundTruthBox& g);
void from_json(const json& j, GroundTruthBox& g);
void to_json(json& j, const LocationEmbedding& l);
void from_json(const json& j, LocationEmbedding& l);
void to_json(json& j, const DipSlot& s);
void from_json(const json& j, DipSlot& s);
void to_json(json& j, const DipInput& d);
void from_json(const json& j, DipInput& d);
void to_json(json& j, const ClassificationTarget& t);
void from_json(const json& j, ClassificationTarget& t);
void to_json(json& j, const StageCounts& c);
void from_json(const json& j, StageCounts& c);
void to_json(json& j, const PseudoLabelSet& p);
void from_json(const json& j, PseudoLabelSet& p);
void to_json(json& j, const DetEvalResult& r);
void to_json(json& j, const RepEvalResult& r);
void from_json(const json& j, DetEvalResult& r);
void from_json(const json& j, RepEvalResult& r);

json read_json_file(const std::filesystem::path& path);
void write_json_file(const json& j, const std::filesystem::path& path, int indent = 2);
void write_text_file(const std::string& text, const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(const std::string& data);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace coedg
