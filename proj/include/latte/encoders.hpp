#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "latte/core_math.hpp"
#include "latte/random.hpp"
#include "latte/text_features.hpp"

namespace latte {

inline constexpr int kEncoderFormatVersion = 1;
/// exp(logit_scale) never exceeds 100.
inline const double kMaxLogitScale = std::log(100.0);
/// ln(1 / 0.07), the usual contrastive initialization.
inline const double kInitLogitScale = std::log(1.0 / 0.07);

/// Parameters of the toy dual encoder: one linear map per modality plus the
/// learnable inverse temperature (in log space).
struct EncoderParams {
  std::size_t dim = 0;          // d, shared embedding width
  std::size_t image_in = 0;     // d_in_img
  std::size_t vocab_size = 0;   // V
  Matrix image_weights;         // image_in x dim
  Matrix text_weights;          // vocab_size x dim
  double logit_scale = kInitLogitScale;

  EncoderParams() = default;
  EncoderParams(std::size_t d, std::size_t d_in, std::size_t v)
      : dim(d), image_in(d_in), vocab_size(v), image_weights(d_in, d), text_weights(v, d) {}

  double temperature() const { return 1.0 / std::exp(logit_scale); }
  void clamp_logit_scale() { logit_scale = std::min(logit_scale, kMaxLogitScale); }

  void validate() const {
    if (dim == 0 || image_in == 0) throw ConfigError("encoder dimensions must be positive");
    if (vocab_size < kMinVocab) throw ConfigError("encoder vocab below minimum");
    if (image_weights.rows() != image_in || image_weights.cols() != dim)
      throw ConfigError("image_weights shape mismatch");
    if (text_weights.rows() != vocab_size || text_weights.cols() != dim)
      throw ConfigError("text_weights shape mismatch");
    if (!all_finite(image_weights.data()) || !all_finite(text_weights.data()) ||
        !std::isfinite(logit_scale))
      throw NumericError("encoder params contain non-finite values");
    if (logit_scale > kMaxLogitScale + 1e-12) throw ConfigError("logit_scale above clamp");
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// Seeded gaussian initialization, scaled by 1/sqrt(fan_in).
inline EncoderParams random_encoder(std::size_t d, std::size_t d_in, std::size_t v,
                                    std::uint64_t seed) {
  EncoderParams p(d, d_in, v);
  Rng rng(seed);
  for (double& w : p.image_weights.data()) w = rng.normal() / std::sqrt(double(d_in));
  for (double& w : p.text_weights.data()) w = rng.normal() / std::sqrt(double(d));
  return p;
}

inline Vector encode_image(const EncoderParams& params, std::span<const double> x) {
  if (x.size() != params.image_in)
    throw ConfigError("image features have length " + std::to_string(x.size()) + ", expected " +
                      std::to_string(params.image_in));
  if (!all_finite(x)) throw NumericError("image features are not finite");
  Vector out(params.dim, 0.0);
  for (std::size_t a = 0; a < params.image_in; ++a) axpy(x[a], params.image_weights.row(a), out);
  return out;
}

/// Sparse input coefficients of the text map. Empty token streams fall back
/// to 1/V on every bucket, so the output is the mean text-weight row.
inline std::vector<std::pair<std::size_t, double>> text_input(const TextFeaturization& f) {
  std::vector<std::pair<std::size_t, double>> in;
  if (f.empty()) {
    in.reserve(f.vocab_size);
    for (std::size_t b = 0; b < f.vocab_size; ++b) in.emplace_back(b, 1.0 / double(f.vocab_size));
  } else {
    for (const auto& [b, c] : f.counts) in.emplace_back(b, double(c));
  }
  return in;
}

inline Vector encode_text(const EncoderParams& params, const TextFeaturization& f) {
  if (f.vocab_size != params.vocab_size) throw ConfigError("featurization vocab mismatch");
  Vector out(params.dim, 0.0);
  for (const auto& [b, coef] : text_input(f)) axpy(coef, params.text_weights.row(b), out);
  return out;
}

inline Vector encode_text(const EncoderParams& params, std::string_view text) {
  return encode_text(params, featurize_text(text, params.vocab_size));
}

/// Immutable deep copy of encoder params, used as the zero-shot model.
class FrozenSnapshot {
 public:
  FrozenSnapshot(const EncoderParams& params, long taken_at_step)
      : params_(std::make_shared<const EncoderParams>(params)), taken_at_step_(taken_at_step) {}

  const EncoderParams& params() const { return *params_; }
  long taken_at_step() const { return taken_at_step_; }

 private:
  std::shared_ptr<const EncoderParams> params_;
  long taken_at_step_;
};

inline FrozenSnapshot snapshot(const EncoderParams& params, long step = 0) {
  return FrozenSnapshot(params, step);
}

inline FrozenSnapshot snapshot(const FrozenSnapshot& s) {
  return FrozenSnapshot(s.params(), s.taken_at_step());
}

// ---- checkpoint file ------------------------------------------------------

inline nlohmann::json encoder_to_json(const EncoderParams& p) {
  return {{"format_version", kEncoderFormatVersion},
          {"d", p.dim},
          {"d_in_img", p.image_in},
          {"V", p.vocab_size},
          {"image_weights", p.image_weights.data()},
          {"text_weights", p.text_weights.data()},
          {"logit_scale", p.logit_scale}};
}

inline EncoderParams encoder_from_json(const nlohmann::json& j) {
  if (j.value("format_version", -1) != kEncoderFormatVersion)
    throw FormatError("encoder checkpoint format_version " +
                      std::to_string(j.value("format_version", -1)) + " is not supported (expected " +
                      std::to_string(kEncoderFormatVersion) + ")");
  EncoderParams p(j.at("d").get<std::size_t>(), j.at("d_in_img").get<std::size_t>(),
                  j.at("V").get<std::size_t>());
  auto iw = j.at("image_weights").get<std::vector<double>>();
  auto tw = j.at("text_weights").get<std::vector<double>>();
  if (iw.size() != p.image_weights.data().size() || tw.size() != p.text_weights.data().size())
    throw FormatError("encoder checkpoint weight sizes do not match declared shape");
  p.image_weights.data() = std::move(iw);
  p.text_weights.data() = std::move(tw);
  p.logit_scale = j.at("logit_scale").get<double>();
  p.validate();
  return p;
}

inline void save_encoder(const EncoderParams& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << encoder_to_json(p).dump() << '\n';
}

inline EncoderParams load_encoder(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("encoder checkpoint " + path.string(), "make-toy");
  return encoder_from_json(nlohmann::json::parse(in));
}

// ---- backend adapter --------------------------------------------------------

/// Pair of encode functions obeying the toy encoder contracts. Real backbones
/// plug in through the registry below.
struct EncoderBackend {
  std::string name;
  std::size_t dim = 0;
  std::function<Vector(std::span<const double>)> encode_image;
  std::function<Vector(std::string_view)> encode_text;
};

using EncoderFactory = std::function<EncoderBackend(const nlohmann::json& config)>;

class EncoderRegistry {
 public:
  static EncoderRegistry& instance() {
    static EncoderRegistry registry;
    return registry;
  }

  void add(const std::string& name, EncoderFactory factory) {
    std::lock_guard lock(mu_);
    factories_[name] = std::move(factory);
  }

  bool contains(const std::string& name) const {
    std::lock_guard lock(mu_);
    return factories_.count(name) != 0;
  }

  /// Construction validates the backend; failures never surface mid-training.
  EncoderBackend make(const std::string& name, const nlohmann::json& config,
                      std::size_t expected_dim) const {
    EncoderFactory factory;
    {
      std::lock_guard lock(mu_);
      auto it = factories_.find(name);
      if (it == factories_.end()) throw BackendUnavailable("no encoder provider named '" + name + "'");
      factory = it->second;
    }
    EncoderBackend backend = factory(config);
    if (backend.dim != expected_dim)
      throw ConfigError("encoder provider '" + name + "' produces dimension " +
                        std::to_string(backend.dim) + ", config expects " +
                        std::to_string(expected_dim));
    return backend;
  }

 private:
  EncoderRegistry() {
    factories_["toy"] = [](const nlohmann::json& config) {
      auto params = std::make_shared<const EncoderParams>(
          config.contains("checkpoint") ? load_encoder(config.at("checkpoint").get<std::string>())
                                        : encoder_from_json(config.at("params")));
      EncoderBackend b;
      b.name = "toy";
      b.dim = params->dim;
      b.encode_image = [params](std::span<const double> x) { return latte::encode_image(*params, x); };
      b.encode_text = [params](std::string_view t) { return latte::encode_text(*params, t); };
      return b;
    };
  }

  mutable std::mutex mu_;
  std::map<std::string, EncoderFactory> factories_;
};

}  // namespace latte
