#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "latte/core_math.hpp"
#include "latte/dataset.hpp"
#include "latte/encoders.hpp"
#include "latte/prompts.hpp"
#include "latte/prototype_bank.hpp"

namespace latte {

inline constexpr int kLabelTableFormatVersion = 1;

/// Text-embedding classifier over rendered class templates.
class TemplateClassifier {
 public:
  TemplateClassifier(const EncoderParams& params, const std::vector<std::string>& class_names)
      : params_(&params), class_embs_(class_names.size(), params.dim) {
    for (std::size_t c = 0; c < class_names.size(); ++c)
      class_embs_.set_row(c, encode_text(params, render_class_text(class_names[c])));
  }

  std::size_t predict(std::span<const double> features, const std::string& image_id = "") const {
    const Vector u = encode_image(*params_, features);
    try {
      return argmax(bank_similarities(u, class_embs_));
    } catch (const DegenerateEmbedding& e) {
      throw DegenerateEmbedding("image '" + image_id + "': " + e.what());
    }
  }

  const Matrix& class_embeddings() const { return class_embs_; }

 private:
  const EncoderParams* params_;
  Matrix class_embs_;
};

/// argmax_c cos(f_frozen(x), g_frozen("a photo of a <c>.")), lowest index on ties.
inline std::size_t zero_shot_label(const FrozenSnapshot& frozen, const std::vector<std::string>& class_names,
                                   std::span<const double> x, const std::string& image_id = "") {
  return TemplateClassifier(frozen.params(), class_names).predict(x, image_id);
}

/// argmax_c cos(f_live(x), p_c), lowest index on ties.
inline std::size_t finetune_label(const EncoderParams& live, const PrototypeBank& bank,
                                  std::span<const double> x, const std::string& image_id = "") {
  const Vector u = encode_image(live, x);
  try {
    return argmax(bank_similarities(u, bank));
  } catch (const DegenerateEmbedding& e) {
    throw DegenerateEmbedding("image '" + image_id + "': " + e.what());
  }
}

/// Frozen-model pseudo-labels, computed once before training.
class LabelTable {
 public:
  void set(const std::string& image_id, std::size_t cls) {
    if (index_.emplace(image_id, rows_.size()).second)
      rows_.emplace_back(image_id, cls);
    else
      rows_[index_.at(image_id)].second = cls;
  }

  std::size_t at(const std::string& image_id) const {
    auto it = index_.find(image_id);
    if (it == index_.end())
      throw MissingArtifact("zero-shot label for image '" + image_id + "'", "pseudo-label");
    return rows_[it->second].second;
  }

  bool contains(const std::string& image_id) const { return index_.count(image_id) != 0; }
  std::size_t size() const { return rows_.size(); }
  const std::vector<std::pair<std::string, std::size_t>>& rows() const { return rows_; }

  friend bool operator==(const LabelTable& a, const LabelTable& b) { return a.rows_ == b.rows_; }

 private:
  std::vector<std::pair<std::string, std::size_t>> rows_;
  std::map<std::string, std::size_t> index_;
};

inline LabelTable label_dataset(const FrozenSnapshot& frozen, const std::vector<std::string>& class_names,
                                const std::vector<Sample>& samples) {
  const TemplateClassifier zs(frozen.params(), class_names);
  LabelTable table;
  for (const auto& s : samples) table.set(s.image_id, zs.predict(s.features, s.image_id));
  return table;
}

inline void save_label_table(const LabelTable& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& [id, cls] : t.rows())
    out << nlohmann::json{{"image_id", id}, {"class_id", cls}, {"format_version", kLabelTableFormatVersion}}
               .dump()
        << '\n';
}

inline LabelTable load_label_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("zero-shot label table " + path.string(), "pseudo-label");
  LabelTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("format_version").get<int>() != kLabelTableFormatVersion)
      throw FormatError("label table format_version mismatch");
    t.set(j.at("image_id").get<std::string>(), j.at("class_id").get<std::size_t>());
  }
  return t;
}

}  // namespace latte
