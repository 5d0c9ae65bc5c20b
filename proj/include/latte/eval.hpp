#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "latte/dataset.hpp"
#include "latte/encoders.hpp"
#include "latte/prototype_bank.hpp"
#include "latte/pseudo_label.hpp"
#include "latte/trainer.hpp"

namespace latte {

/// argmax_c cos(f(x), p_c), lowest index on ties.
inline std::size_t predict(const PrototypeBank& bank, const EncoderParams& live, std::span<const double> x,
                           const std::string& image_id = "") {
  return finetune_label(live, bank, x, image_id);
}

/// Trained artifacts needed for inference. latteclip checkpoints classify with
/// prototypes; flyp_pl/oracle checkpoints with live class-template texts.
struct Checkpoint {
  TrainMode mode = TrainMode::kLatteClip;
  std::vector<std::string> class_names;
  EncoderParams encoder;
  std::optional<PrototypeBank> bank;
  std::string id;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream manifest_in(dir / "checkpoint.json");
  if (!manifest_in) throw MissingArtifact("checkpoint in " + dir.string(), "train");
  const auto manifest = nlohmann::json::parse(manifest_in);
  Checkpoint ck;
  ck.mode = train_mode_from_string(manifest.at("mode").get<std::string>());
  ck.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  ck.encoder = load_encoder(dir / "encoder.json");
  if (std::filesystem::exists(dir / "prototypes.json")) ck.bank = load_bank(dir / "prototypes.json");
  ck.id = dir.filename().string() + "@" + std::to_string(manifest.at("step").get<long>());
  if (ck.mode == TrainMode::kLatteClip && !ck.bank)
    throw FormatError("latteclip checkpoint in " + dir.string() + " has no prototypes.json");
  if (ck.mode != TrainMode::kLatteClip && ck.bank)
    throw FormatError(std::string(to_string(ck.mode)) + " checkpoint must not carry a prototype bank");
  return ck;
}

using Predictor = std::function<std::size_t(const Sample&)>;

/// Builds the mode-appropriate classifier for a checkpoint.
inline Predictor make_predictor(const Checkpoint& ck) {
  if (ck.mode == TrainMode::kLatteClip) {
    if (!ck.bank) throw FormatError("latteclip evaluation requires a prototype bank");
    if (ck.bank->class_names != ck.class_names) throw FormatError("prototype classes differ from checkpoint");
    return [&ck](const Sample& s) { return predict(*ck.bank, ck.encoder, s.features, s.image_id); };
  }
  if (ck.bank) throw FormatError(std::string(to_string(ck.mode)) + " evaluation never uses a prototype bank");
  auto clf = std::make_shared<TemplateClassifier>(ck.encoder, ck.class_names);
  return [clf](const Sample& s) { return clf->predict(s.features, s.image_id); };
}

struct EvalReport {
  std::string dataset;
  std::string mode;
  double top1 = 0.0;
  std::vector<double> per_class_top1;
  std::size_t n = 0;
  std::size_t correct = 0;
  std::string checkpoint_id;
};

inline EvalReport evaluate(const std::vector<Sample>& samples, std::size_t num_classes, const Predictor& predict_fn) {
  if (samples.empty()) throw ConfigError("cannot evaluate an empty split");
  EvalReport r;
  std::vector<std::size_t> hits(num_classes, 0), totals(num_classes, 0);
  for (const auto& s : samples) {
    if (!s.gt_label) throw FormatError("evaluation sample '" + s.image_id + "' has no gt_label");
    const bool ok = predict_fn(s) == *s.gt_label;
    ++totals[*s.gt_label];
    hits[*s.gt_label] += ok;
    r.correct += ok;
  }
  r.n = samples.size();
  r.top1 = 100.0 * double(r.correct) / double(r.n);
  for (std::size_t c = 0; c < num_classes; ++c)
    r.per_class_top1.push_back(totals[c] ? 100.0 * double(hits[c]) / double(totals[c]) : 0.0);
  return r;
}

inline EvalReport evaluate(const Dataset& ds, Split split, const Checkpoint& ck) {
  if (ck.class_names != ds.class_names) throw FormatError("checkpoint classes differ from dataset classes");
  EvalReport r = evaluate(ds.split(split), ds.class_names.size(), make_predictor(ck));
  r.dataset = ds.name + ":" + std::string(to_string(split));
  r.mode = std::string(to_string(ck.mode));
  r.checkpoint_id = ck.id;
  return r;
}

inline nlohmann::json eval_to_json(const EvalReport& r) {
  return {{"dataset", r.dataset},          {"mode", r.mode}, {"top1", r.top1},
          {"per_class_top1", r.per_class_top1}, {"n", r.n},  {"correct", r.correct},
          {"checkpoint_id", r.checkpoint_id}, {"format_version", 1}};
}

inline std::string eval_table(const EvalReport& r, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-24s %8s\n", "class", "top1");
  os << buf;
  for (std::size_t c = 0; c < r.per_class_top1.size(); ++c) {
    std::snprintf(buf, sizeof buf, "%-24s %8.2f\n", c < class_names.size() ? class_names[c].c_str() : "?",
                  r.per_class_top1[c]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-24s %8.2f  (%zu/%zu, %s)\n", "overall", r.top1, r.correct, r.n, r.mode.c_str());
  os << buf;
  return os.str();
}

}  // namespace latte
