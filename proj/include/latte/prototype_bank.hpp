#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "latte/core_math.hpp"
#include "latte/encoders.hpp"
#include "latte/prompts.hpp"

namespace latte {

inline constexpr int kPrototypeFormatVersion = 1;

/// One prototype vector per class, plus the momentum and blend weights used to
/// evolve them. Rows are never renormalized; similarities normalize on read.
struct PrototypeBank {
  std::vector<std::string> class_names;
  Matrix vectors;  // C x d
  double mu = 0.99;
  double alpha = 0.99;
  long step = 0;

  std::size_t num_classes() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
  std::span<const double> prototype(std::size_t c) const { return vectors.row(c); }

  friend bool operator==(const PrototypeBank&, const PrototypeBank&) = default;
};

inline void validate_class_names(const std::vector<std::string>& names) {
  if (names.size() < 2) throw ConfigError("at least two classes are required");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (n.empty()) throw ConfigError("class names must be non-empty");
    if (!seen.insert(n).second) throw ConfigError("duplicate class name '" + n + "'");
  }
}

inline SimilarityRow bank_similarities(std::span<const double> query, const PrototypeBank& bank) {
  return bank_similarities(query, bank.vectors);
}

/// p_c = normalize(g_frozen("a photo of a <name_c>.")).
inline PrototypeBank init_from_class_texts(const EncoderParams& frozen,
                                           const std::vector<std::string>& class_names,
                                           double mu = 0.99, double alpha = 0.99) {
  validate_class_names(class_names);
  if (mu < 0.0 || mu > 1.0 || alpha < 0.0 || alpha > 1.0)
    throw ConfigError("mu and alpha must lie in [0, 1]");
  PrototypeBank bank;
  bank.class_names = class_names;
  bank.vectors = Matrix(class_names.size(), frozen.dim);
  bank.mu = mu;
  bank.alpha = alpha;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    const Vector t = encode_text(frozen, render_class_text(class_names[c]));
    bank.vectors.set_row(c, l2_normalize(t));
  }
  return bank;
}

struct Assignment {
  std::size_t cls = 0;
  Vector t_bar;
};

/// For every class present: p_c <- (1 - mu) * mean(t_bar of c) + mu * p_c.
/// Returns the number of classes touched.
inline std::size_t batch_momentum_update(PrototypeBank& bank, std::span<const Assignment> assignments) {
  std::map<std::size_t, std::pair<Vector, std::size_t>> sums;
  for (const auto& a : assignments) {
    if (a.cls >= bank.num_classes())
      throw ConfigError("assignment class " + std::to_string(a.cls) + " out of range");
    if (a.t_bar.size() != bank.dim()) throw ConfigError("assignment dimension mismatch");
    if (!all_finite(a.t_bar)) throw NumericError("non-finite prototype-text embedding");
    auto& [sum, count] = sums[a.cls];
    if (sum.empty()) sum.assign(bank.dim(), 0.0);
    axpy(1.0, a.t_bar, sum);
    ++count;
  }
  for (const auto& [c, acc] : sums) {
    const auto& [sum, count] = acc;
    auto row = bank.vectors.row(c);
    for (std::size_t k = 0; k < row.size(); ++k) {
      const double mean = sum[k] / double(count);
      row[k] = (1.0 - bank.mu) * mean + bank.mu * row[k];
    }
  }
  return sums.size();
}

inline nlohmann::json bank_to_json(const PrototypeBank& b) {
  return {{"format_version", kPrototypeFormatVersion},
          {"class_names", b.class_names},
          {"d", b.dim()},
          {"vectors", b.vectors.data()},
          {"mu", b.mu},
          {"alpha", b.alpha},
          {"step", b.step}};
}

inline PrototypeBank bank_from_json(const nlohmann::json& j) {
  const int version = j.value("format_version", -1);
  if (version != kPrototypeFormatVersion)
    throw FormatError("prototype checkpoint format_version " + std::to_string(version) +
                      " needs migration to " + std::to_string(kPrototypeFormatVersion));
  PrototypeBank b;
  b.class_names = j.at("class_names").get<std::vector<std::string>>();
  const auto d = j.at("d").get<std::size_t>();
  auto data = j.at("vectors").get<std::vector<double>>();
  if (d == 0 || data.size() != b.class_names.size() * d)
    throw FormatError("prototype checkpoint has " + std::to_string(b.class_names.size()) +
                      " class names but " + std::to_string(d ? data.size() / d : 0) + " vectors");
  validate_class_names(b.class_names);
  b.vectors = Matrix(b.class_names.size(), d);
  b.vectors.data() = std::move(data);
  b.mu = j.at("mu").get<double>();
  b.alpha = j.at("alpha").get<double>();
  b.step = j.at("step").get<long>();
  return b;
}

inline void save_bank(const PrototypeBank& b, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << bank_to_json(b).dump() << '\n';
}

inline PrototypeBank load_bank(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("prototype checkpoint " + path.string(), "train");
  return bank_from_json(nlohmann::json::parse(in));
}

}  // namespace latte
