#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "latte/core_math.hpp"
#include "latte/encoders.hpp"
#include "latte/prototype_bank.hpp"
#include "latte/random.hpp"

namespace latte {

inline constexpr int kDatasetFormatVersion = 1;

struct Sample {
  std::string image_id;
  Vector features;
  std::optional<std::size_t> gt_label;
};

enum class Split { kTrain, kVal, kTest };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

struct Dataset {
  std::string name;
  std::string domain;
  std::vector<std::string> class_names;
  std::size_t feature_dim = 0;
  double caption_noise = 0.0;  // noise level the stub captioner should use
  std::vector<Sample> train, val, test;

  std::vector<Sample>& split(Split s) {
    return s == Split::kTrain ? train : (s == Split::kVal ? val : test);
  }
  const std::vector<Sample>& split(Split s) const {
    return s == Split::kTrain ? train : (s == Split::kVal ? val : test);
  }

  /// Unlabeled training pool: train and val combined.
  std::vector<Sample> training_pool() const {
    std::vector<Sample> all = train;
    all.insert(all.end(), val.begin(), val.end());
    return all;
  }
};

inline void validate_split(const std::vector<Sample>& samples, std::size_t num_classes,
                           std::size_t feature_dim, std::string_view what) {
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (!ids.insert(s.image_id).second)
      throw FormatError("duplicate image_id '" + s.image_id + "' in " + std::string(what));
    if (s.features.size() != feature_dim)
      throw FormatError("image '" + s.image_id + "' has " + std::to_string(s.features.size()) +
                        " features, expected " + std::to_string(feature_dim));
    if (!all_finite(s.features)) throw FormatError("image '" + s.image_id + "' has non-finite features");
    if (s.gt_label && *s.gt_label >= num_classes)
      throw FormatError("image '" + s.image_id + "' gt_label out of range");
  }
}

// ---- files ----------------------------------------------------------------
// <dir>/meta.json, <dir>/classes.txt, <dir>/{train,val,test}.jsonl

inline void write_split(const std::vector<Sample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& s : samples) {
    nlohmann::json j{{"image_id", s.image_id}, {"features", s.features}};
    j["gt_label"] = s.gt_label ? nlohmann::json(*s.gt_label) : nlohmann::json(nullptr);
    out << j.dump() << '\n';
  }
}

inline std::vector<Sample> read_split(const std::filesystem::path& path) {
  std::vector<Sample> samples;
  std::ifstream in(path, std::ios::binary);
  if (!in) return samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Sample s;
      s.image_id = j.at("image_id").get<std::string>();
      s.features = j.at("features").get<Vector>();
      if (j.contains("gt_label") && !j["gt_label"].is_null()) s.gt_label = j["gt_label"].get<std::size_t>();
      samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return samples;
}

inline void write_class_names(const std::vector<std::string>& names, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& n : names) out << n << '\n';
}

inline std::vector<std::string> read_class_names(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("class-names file " + path.string(), "make-toy");
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  validate_class_names(names);
  return names;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta{{"format_version", kDatasetFormatVersion},
                      {"name", ds.name},
                      {"domain", ds.domain},
                      {"feature_dim", ds.feature_dim},
                      {"caption_noise", ds.caption_noise}};
  std::ofstream(dir / "meta.json", std::ios::trunc) << meta.dump(2) << '\n';
  write_class_names(ds.class_names, dir / "classes.txt");
  write_split(ds.train, dir / "train.jsonl");
  write_split(ds.val, dir / "val.jsonl");
  write_split(ds.test, dir / "test.jsonl");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw MissingArtifact("dataset at " + dir.string(), "make-toy");
  const auto meta = nlohmann::json::parse(meta_in);
  if (meta.value("format_version", -1) != kDatasetFormatVersion)
    throw FormatError("dataset format_version mismatch");
  Dataset ds;
  ds.name = meta.at("name").get<std::string>();
  ds.domain = meta.at("domain").get<std::string>();
  ds.feature_dim = meta.at("feature_dim").get<std::size_t>();
  ds.caption_noise = meta.value("caption_noise", 0.0);
  ds.class_names = read_class_names(dir / "classes.txt");
  ds.train = read_split(dir / "train.jsonl");
  ds.val = read_split(dir / "val.jsonl");
  ds.test = read_split(dir / "test.jsonl");
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest})
    validate_split(ds.split(s), ds.class_names.size(), ds.feature_dim, to_string(s));
  for (const auto& s : ds.test)
    if (!s.gt_label) throw FormatError("test sample '" + s.image_id + "' lacks gt_label");
  return ds;
}

}  // namespace latte
