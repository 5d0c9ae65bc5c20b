#pragma once

#include <chrono>
#include <cstdio>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "latte/pipeline.hpp"

namespace latte {

/// One axis of the ablation grid: a knob name and the values to sweep.
/// Knobs: descriptions (list of kind names), use_mixer, use_zs_loss,
/// use_ft_loss, mu, alpha, group_size, correct_in_group, data_fraction,
/// gap_reference.
struct AblationAxis {
  std::string name;
  std::vector<nlohmann::json> values;
};

struct AblationSpec {
  ToyConfig toy;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<AblationAxis> axes;
  /// Recipe before axis overrides; the per-seed seed is filled in.
  std::function<TrainConfig(std::uint64_t)> base = toy_train_config;
};

struct AblationCell {
  nlohmann::json settings = nlohmann::json::object();
  std::optional<std::string> skipped;
  std::vector<EvalReport> reports;
  std::vector<double> zero_shot_top1;
  double mean_top1 = 0.0;
  double mean_zero_shot_top1 = 0.0;
};

inline const std::set<std::string>& ablation_knobs() {
  static const std::set<std::string> k = {"descriptions",     "use_mixer",     "use_zs_loss",
                                          "use_ft_loss",      "mu",            "alpha",
                                          "group_size",       "correct_in_group", "data_fraction",
                                          "gap_reference"};
  return k;
}

/// Applies one knob to a config. Throws ConfigError for malformed values; the
/// caller decides whether that is fatal or just makes the cell infeasible.
inline void apply_knob(const std::string& name, const nlohmann::json& v, TrainConfig& cfg,
                       std::optional<std::size_t>& correct_in_group) {
  try {
    if (name == "descriptions") {
      cfg.enabled_descriptions = {false, false, false};
      for (const auto& k : v) cfg.enabled_descriptions[kind_index(caption_kind_from_string(k.get<std::string>()))] = true;
    } else if (name == "use_mixer") cfg.use_mixer = v.get<bool>();
    else if (name == "use_zs_loss") cfg.use_zs_loss = v.get<bool>();
    else if (name == "use_ft_loss") cfg.use_ft_loss = v.get<bool>();
    else if (name == "mu") cfg.mu = v.get<double>();
    else if (name == "alpha") cfg.alpha = v.get<double>();
    else if (name == "group_size") cfg.group_size = v.get<std::size_t>();
    else if (name == "correct_in_group") correct_in_group = v.get<std::size_t>();
    else if (name == "data_fraction") cfg.data_fraction = v.get<double>();
    else if (name == "gap_reference") cfg.gap_reference = gap_reference_from_string(v.get<std::string>());
    else throw ConfigError("unknown ablation knob '" + name + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value " + v.dump() + " for ablation knob '" + name + "': " + e.what());
  }
}

/// Parses "name=v1,v2" where each value is JSON, or a bare word treated as a
/// string. For `descriptions`, values are '+'-joined kind lists
/// ("class+image+group", "class").
inline AblationAxis parse_axis(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("axis must look like name=v1,v2: '" + text + "'");
  AblationAxis a;
  a.name = text.substr(0, eq);
  if (!ablation_knobs().count(a.name)) throw ConfigError("unknown ablation knob '" + a.name + "'");
  std::stringstream ss(text.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (a.name == "descriptions") {
      nlohmann::json kinds = nlohmann::json::array();
      std::stringstream ks(item);
      std::string k;
      while (std::getline(ks, k, '+'))
        if (!k.empty() && k != "none") kinds.push_back(k);
      a.values.push_back(kinds);
      continue;
    }
    try {
      a.values.push_back(nlohmann::json::parse(item));
    } catch (const nlohmann::json::exception&) {
      a.values.push_back(item);
    }
  }
  if (a.values.empty()) throw ConfigError("axis '" + a.name + "' has no values");
  return a;
}

/// Named grids mirroring the usual ablation tables.
inline std::vector<AblationAxis> ablation_preset(const std::string& name) {
  auto kinds = [](std::initializer_list<const char*> ks) {
    nlohmann::json j = nlohmann::json::array();
    for (const char* k : ks) j.push_back(k);
    return j;
  };
  if (name == "descriptions")
    return {{"descriptions",
             {kinds({"class"}), kinds({"class", "image"}), kinds({"class", "group"}),
              kinds({"class", "image", "group"})}}};
  if (name == "components") return {{"use_mixer", {true, false}}, {"mu", {0.99, 0.0}}};
  if (name == "losses")
    return {{"use_zs_loss", {true, false}}, {"use_ft_loss", {true, false}}};
  if (name == "group-size") return {{"group_size", {2, 4, 8, 16}}};
  if (name == "correct-in-group") return {{"correct_in_group", {1, 2, 3, 4}}};
  if (name == "data-fraction") return {{"data_fraction", {0.1, 0.2, 0.5, 1.0}}};
  throw ConfigError("unknown ablation preset '" + name +
                    "' (descriptions|components|losses|group-size|correct-in-group|data-fraction)");
}

/// Cross product of every axis; each cell is run over all seeds on freshly
/// generated toy worlds. Infeasible cells are reported as skipped.
inline std::vector<AblationCell> ablation_matrix(const AblationSpec& spec,
                                                 const std::function<void(const AblationCell&)>& on_cell = {}) {
  for (const auto& a : spec.axes) {
    if (!ablation_knobs().count(a.name)) throw ConfigError("unknown ablation knob '" + a.name + "'");
    if (a.values.empty()) throw ConfigError("axis '" + a.name + "' has no values");
  }
  if (spec.seeds.empty()) throw ConfigError("ablation needs at least one seed");

  std::vector<ToyWorld> worlds;
  for (std::uint64_t seed : spec.seeds) {
    ToyConfig tc = spec.toy;
    tc.seed = seed;
    worlds.push_back(make_toy_world(tc));
  }

  std::vector<AblationCell> cells;
  std::vector<std::size_t> idx(spec.axes.size(), 0);
  while (true) {
    AblationCell cell;
    for (std::size_t a = 0; a < spec.axes.size(); ++a) cell.settings[spec.axes[a].name] = spec.axes[a].values[idx[a]];
    try {
      for (std::size_t s = 0; s < spec.seeds.size(); ++s) {
        TrainConfig cfg = spec.base(spec.seeds[s]);
        std::optional<std::size_t> correct;
        for (std::size_t a = 0; a < spec.axes.size(); ++a)
          apply_knob(spec.axes[a].name, spec.axes[a].values[idx[a]], cfg, correct);
        cfg.validate();
        if (correct && (*correct < 1 || *correct > cfg.group_size))
          throw ConfigError("correct_in_group must be in [1, group_size]");
        if (correct && !cfg.enabled_descriptions[kind_index(CaptionKind::kGroup)])
          throw ConfigError("correct_in_group has no effect without group descriptions");
        const ToyRunResult r = run_toy_pipeline(worlds[s], cfg, correct);
        cell.reports.push_back(r.final_report);
        cell.zero_shot_top1.push_back(r.zero_shot_top1);
      }
      for (std::size_t s = 0; s < cell.reports.size(); ++s) {
        cell.mean_top1 += cell.reports[s].top1 / double(cell.reports.size());
        cell.mean_zero_shot_top1 += cell.zero_shot_top1[s] / double(cell.reports.size());
      }
    } catch (const ConfigError& e) {
      cell.skipped = e.what();
      cell.reports.clear();
      cell.zero_shot_top1.clear();
    }
    if (on_cell) on_cell(cell);
    cells.push_back(std::move(cell));

    std::size_t a = 0;
    for (; a < idx.size(); ++a) {
      if (++idx[a] < spec.axes[a].values.size()) break;
      idx[a] = 0;
    }
    if (a == idx.size()) break;
  }
  return cells;
}

inline nlohmann::json ablation_to_json(const std::vector<AblationCell>& cells) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json j{{"settings", c.settings}};
    if (c.skipped) {
      j["skipped"] = *c.skipped;
    } else {
      j["mean_top1"] = c.mean_top1;
      j["mean_zero_shot_top1"] = c.mean_zero_shot_top1;
      j["reports"] = nlohmann::json::array();
      for (const auto& r : c.reports) j["reports"].push_back(eval_to_json(r));
    }
    out.push_back(j);
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationCell>& cells) {
  std::ostringstream os;
  for (const auto& c : cells) {
    char buf[64];
    if (c.skipped) {
      os << "skipped  ";
    } else {
      std::snprintf(buf, sizeof buf, "%7.2f  ", c.mean_top1);
      os << buf;
    }
    os << c.settings.dump();
    if (c.skipped) os << "  (" << *c.skipped << ")";
    os << '\n';
  }
  return os.str();
}

}  // namespace latte
