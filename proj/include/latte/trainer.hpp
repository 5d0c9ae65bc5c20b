#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "latte/captions.hpp"
#include "latte/contrastive.hpp"
#include "latte/core_math.hpp"
#include "latte/dataset.hpp"
#include "latte/encoders.hpp"
#include "latte/feature_mixer.hpp"
#include "latte/prototype_bank.hpp"
#include "latte/pseudo_label.hpp"
#include "latte/random.hpp"

namespace latte {

enum class TrainMode { kLatteClip, kFlypPl, kOracle };
enum class LabelSource { kPrototypes, kTemplates };
enum class OptimizerKind { kSgd, kAdamW };

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kLatteClip: return "latteclip";
    case TrainMode::kFlypPl: return "flyp_pl";
    case TrainMode::kOracle: return "oracle";
  }
  return "?";
}

inline TrainMode train_mode_from_string(std::string_view s) {
  if (s == "latteclip") return TrainMode::kLatteClip;
  if (s == "flyp_pl" || s == "flyp-pl") return TrainMode::kFlypPl;
  if (s == "oracle") return TrainMode::kOracle;
  throw ConfigError("mode must be latteclip|flyp_pl|oracle, got '" + std::string(s) + "'");
}

struct TrainConfig {
  TrainMode mode = TrainMode::kLatteClip;
  std::size_t batch_size = 512;
  double learning_rate = 1e-7;
  long max_iterations = 2000;
  long max_epochs = 50;
  double mu = 0.99;
  double alpha = 0.99;
  std::size_t group_size = 4;
  PerKind<bool> enabled_descriptions = {true, true, true};
  bool use_mixer = true;
  bool use_zs_loss = true;
  bool use_ft_loss = true;
  double data_fraction = 1.0;
  std::uint64_t seed = 0;
  LabelSource ft_label_source = LabelSource::kPrototypes;
  GapReference gap_reference = GapReference::kTop2;
  // Extensions beyond the core recipe.
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double weight_decay = 0.0;
  bool train_logit_scale = true;
  bool dedupe_streams = false;
  bool grad_through_weights = false;

  MixOptions mix_options() const {
    return {alpha, use_mixer, enabled_descriptions, gap_reference};
  }

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
    if (max_iterations < 0 || max_epochs < 0) throw ConfigError("schedule bounds must be non-negative");
    if (mu < 0 || mu > 1 || alpha < 0 || alpha > 1) throw ConfigError("mu and alpha must lie in [0, 1]");
    if (!valid_group_size(group_size)) throw ConfigError("group_size must be one of 2, 4, 8, 16");
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw ConfigError("data_fraction must be in (0, 1]");
    if (mode == TrainMode::kLatteClip) {
      if (!use_zs_loss && !use_ft_loss) throw ConfigError("enable at least one of use_zs_loss/use_ft_loss");
      if (std::none_of(enabled_descriptions.begin(), enabled_descriptions.end(), [](bool b) { return b; }))
        throw ConfigError("enabled_descriptions must not be empty");
    }
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  }
};

inline nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json kinds = nlohmann::json::array();
  for (CaptionKind k : kAllKinds)
    if (c.enabled_descriptions[kind_index(k)]) kinds.push_back(std::string(to_string(k)));
  return {{"mode", std::string(to_string(c.mode))},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"max_iterations", c.max_iterations},
          {"max_epochs", c.max_epochs},
          {"mu", c.mu},
          {"alpha", c.alpha},
          {"group_size", c.group_size},
          {"enabled_descriptions", kinds},
          {"use_mixer", c.use_mixer},
          {"use_zs_loss", c.use_zs_loss},
          {"use_ft_loss", c.use_ft_loss},
          {"data_fraction", c.data_fraction},
          {"seed", c.seed},
          {"ft_label_source", c.ft_label_source == LabelSource::kPrototypes ? "prototypes" : "templates"},
          {"gap_reference", std::string(to_string(c.gap_reference))},
          {"optimizer", c.optimizer == OptimizerKind::kSgd ? "sgd" : "adamw"},
          {"weight_decay", c.weight_decay},
          {"train_logit_scale", c.train_logit_scale},
          {"dedupe_streams", c.dedupe_streams},
          {"grad_through_weights", c.grad_through_weights}};
}

/// Unknown keys are rejected; missing keys keep their defaults.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "mode",          "batch_size",   "learning_rate",   "max_iterations",  "max_epochs",
      "mu",            "alpha",        "group_size",      "enabled_descriptions", "use_mixer",
      "use_zs_loss",   "use_ft_loss",  "data_fraction",   "seed",            "ft_label_source",
      "gap_reference", "optimizer",    "weight_decay",    "train_logit_scale", "dedupe_streams",
      "grad_through_weights"};
  if (!j.is_object()) throw ConfigError("train config must be an object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("unknown train config key '" + k + "'");
  TrainConfig c;
  try {
    if (j.contains("mode")) c.mode = train_mode_from_string(j["mode"].get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.mu = j.value("mu", c.mu);
    c.alpha = j.value("alpha", c.alpha);
    c.group_size = j.value("group_size", c.group_size);
    if (j.contains("enabled_descriptions")) {
      c.enabled_descriptions = {false, false, false};
      for (const auto& k : j["enabled_descriptions"])
        c.enabled_descriptions[kind_index(caption_kind_from_string(k.get<std::string>()))] = true;
    }
    c.use_mixer = j.value("use_mixer", c.use_mixer);
    c.use_zs_loss = j.value("use_zs_loss", c.use_zs_loss);
    c.use_ft_loss = j.value("use_ft_loss", c.use_ft_loss);
    c.data_fraction = j.value("data_fraction", c.data_fraction);
    c.seed = j.value("seed", c.seed);
    if (j.contains("ft_label_source")) {
      const auto s = j["ft_label_source"].get<std::string>();
      if (s == "prototypes") c.ft_label_source = LabelSource::kPrototypes;
      else if (s == "templates") c.ft_label_source = LabelSource::kTemplates;
      else throw ConfigError("ft_label_source must be prototypes|templates");
    }
    if (j.contains("gap_reference")) c.gap_reference = gap_reference_from_string(j["gap_reference"].get<std::string>());
    if (j.contains("optimizer")) {
      const auto s = j["optimizer"].get<std::string>();
      if (s == "sgd") c.optimizer = OptimizerKind::kSgd;
      else if (s == "adamw") c.optimizer = OptimizerKind::kAdamW;
      else throw ConfigError("optimizer must be sgd|adamw");
    }
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.train_logit_scale = j.value("train_logit_scale", c.train_logit_scale);
    c.dedupe_streams = j.value("dedupe_streams", c.dedupe_streams);
    c.grad_through_weights = j.value("grad_through_weights", c.grad_through_weights);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- caption lookup at training time -------------------------------------------

/// Read-only view of the caption cache arranged for training. Group captions
/// for class c come from the anchor's own record when one exists, otherwise
/// from a seeded uniform draw over every group caption recorded for c.
class CaptionIndex {
 public:
  CaptionIndex() = default;
  CaptionIndex(const CaptionCache& cache, std::vector<std::string> class_names, std::uint64_t seed)
      : class_names_(std::move(class_names)), seed_(seed), pools_(class_names_.size()) {
    for (const auto& r : cache.scan(CaptionKind::kImage)) image_text_[r.image_id] = r.text;
    // Key order, not insertion order: parallel describe runs append in
    // scheduling order, and pool order feeds the seeded draws below.
    auto groups = cache.scan(CaptionKind::kGroup);
    std::sort(groups.begin(), groups.end(),
              [](const CaptionRecord& a, const CaptionRecord& b) { return a.key() < b.key(); });
    for (const auto& r : groups) {
      if (!r.class_id || *r.class_id >= class_names_.size()) continue;
      group_text_[{r.image_id, *r.class_id}] = r.text;
      pools_[*r.class_id].push_back(r.text);
    }
  }

  bool has_image_caption(const std::string& id) const { return image_text_.count(id) != 0; }
  std::size_t group_pool_size(std::size_t cls) const { return pools_.at(cls).size(); }

  DescriptionSet lookup(const std::string& image_id, std::size_t cls, long step,
                        const PerKind<bool>& enabled) const {
    DescriptionSet d;
    if (class_names_.empty()) throw MissingArtifact("caption index (no caption cache loaded)", "describe");
    if (cls >= class_names_.size()) throw ConfigError("pseudo-label out of range");
    d.texts[kind_index(CaptionKind::kClass)] = render_class_text(class_names_[cls]);
    if (enabled[kind_index(CaptionKind::kImage)]) {
      auto it = image_text_.find(image_id);
      if (it == image_text_.end())
        throw MissingArtifact("image caption for '" + image_id + "'", "describe --kinds image");
      d.texts[kind_index(CaptionKind::kImage)] = it->second;
    }
    if (enabled[kind_index(CaptionKind::kGroup)]) {
      auto it = group_text_.find({image_id, cls});
      if (it != group_text_.end()) {
        d.texts[kind_index(CaptionKind::kGroup)] = it->second;
      } else {
        const auto& pool = pools_[cls];
        if (pool.empty())
          throw MissingArtifact("group caption pool for class " + std::to_string(cls) + " ('" +
                                    class_names_[cls] + "')",
                                "describe --kinds group");
        Rng rng(mix_seed(mix_seed(seed_, std::uint64_t(step)), fnv1a64(image_id) ^ cls));
        d.texts[kind_index(CaptionKind::kGroup)] = pool[rng.below(pool.size())];
      }
    }
    return d;
  }

 private:
  std::vector<std::string> class_names_;
  std::uint64_t seed_ = 0;
  std::unordered_map<std::string, std::string> image_text_;
  std::map<std::pair<std::string, std::size_t>, std::string> group_text_;
  std::vector<std::vector<std::string>> pools_;
};

// ---- gradients and objectives --------------------------------------------------

/// Same shapes as EncoderParams.
struct Gradient {
  Matrix image;
  Matrix text;
  double logit_scale = 0.0;

  explicit Gradient(const EncoderParams& p)
      : image(p.image_in, p.dim), text(p.vocab_size, p.dim) {}

  double norm() const {
    double s = logit_scale * logit_scale;
    for (double g : image.data()) s += g * g;
    for (double g : text.data()) s += g * g;
    return std::sqrt(s);
  }
};

/// Pseudo-labels and texts for one stream of one batch.
struct StreamPlan {
  std::vector<std::size_t> labels;
  std::vector<DescriptionSet> descriptions;
  std::vector<PerKind<double>> fixed_weights;  // empty: compute from the bank
};

struct BatchPlan {
  std::vector<const Sample*> samples;
  std::optional<StreamPlan> zs;
  std::optional<StreamPlan> ft;
};

struct StreamOutcome {
  double loss = 0.0;
  std::vector<MixResult> mixes;
};

struct ObjectiveResult {
  std::optional<StreamOutcome> zs;
  std::optional<StreamOutcome> ft;
  double total = 0.0;
};

namespace detail {

inline Matrix encode_batch(const EncoderParams& p, const std::vector<const Sample*>& samples) {
  Matrix u(samples.size(), p.dim);
  for (std::size_t i = 0; i < samples.size(); ++i) u.set_row(i, encode_image(p, samples[i]->features));
  return u;
}

inline void accumulate_image_grad(const std::vector<const Sample*>& samples, const Matrix& grad_u,
                                  Gradient& g) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& x = samples[i]->features;
    for (std::size_t a = 0; a < x.size(); ++a) axpy(x[a], grad_u.row(i), g.image.row(a));
  }
}

inline void accumulate_text_grad(const TextFeaturization& f, std::span<const double> grad_g, Gradient& g) {
  for (const auto& [b, coef] : text_input(f)) axpy(coef, grad_g, g.text.row(b));
}

}  // namespace detail

/// Loss of one mixed stream against the image batch, and (optionally) its
/// gradient. Prototypes are constants; description weights are constants
/// unless grad_through_weights is set and no fixed weights are supplied.
inline StreamOutcome stream_objective(const EncoderParams& p, const PrototypeBank& bank,
                                      const std::vector<const Sample*>& samples, const Matrix& u,
                                      const StreamPlan& plan, const TrainConfig& cfg, Gradient* grad) {
  const std::size_t n = samples.size();
  const MixOptions opt = cfg.mix_options();
  StreamOutcome out;
  std::vector<PerKind<TextFeaturization>> feats(n);
  Matrix t_bar(n, p.dim);
  for (std::size_t j = 0; j < n; ++j) {
    PerKind<Vector> raw;
    for (std::size_t k = 0; k < 3; ++k) {
      if (!opt.enabled[k]) continue;
      feats[j][k] = featurize_text(plan.descriptions[j].texts[k], p.vocab_size);
      raw[k] = encode_text(p, feats[j][k]);
    }
    const PerKind<double>* fixed = plan.fixed_weights.empty() ? nullptr : &plan.fixed_weights[j];
    out.mixes.push_back(mix_embeddings(raw, bank, plan.labels[j], opt, fixed));
    t_bar.set_row(j, out.mixes.back().t_bar);
  }
  const ContrastiveResult cr = contrastive_loss_with_grad(u, t_bar, p.temperature());
  out.loss = cr.loss;
  if (!grad) return out;

  detail::accumulate_image_grad(samples, cr.grad_image, *grad);
  if (cfg.train_logit_scale) grad->logit_scale += cr.grad_inv_temperature * std::exp(p.logit_scale);

  const bool weight_grads = cfg.grad_through_weights && cfg.use_mixer && plan.fixed_weights.empty();
  std::vector<Vector> unit_protos;
  if (weight_grads)
    for (std::size_t c = 0; c < bank.num_classes(); ++c) unit_protos.push_back(l2_normalize(bank.prototype(c)));

  for (std::size_t j = 0; j < n; ++j) {
    const MixResult& m = out.mixes[j];
    const auto g_tbar = cr.grad_text.row(j);
    const double blend = 1.0 - cfg.alpha;
    Vector avg;
    if (weight_grads && !m.used_fallback) {
      avg.assign(p.dim, 0.0);
      for (std::size_t k = 0; k < 3; ++k)
        if (opt.enabled[k]) axpy(m.weights[k] / m.weight_sum, m.normalized[k], avg);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      if (!opt.enabled[k]) continue;
      Vector g_hat(p.dim, 0.0);
      axpy(blend * m.weights[k] / m.weight_sum, g_tbar, g_hat);
      if (!avg.empty() && m.details[k].w > 0.0) {
        double dw = 0.0;
        for (std::size_t q = 0; q < p.dim; ++q) dw += g_tbar[q] * (m.normalized[k][q] - avg[q]);
        dw *= blend / m.weight_sum;
        for (std::size_t c = 0; c < unit_protos.size(); ++c)
          if (m.details[k].coef[c] != 0.0) axpy(dw * m.details[k].coef[c], unit_protos[c], g_hat);
      }
      const Vector g_raw = normalize_backward(m.normalized[k], m.raw_norms[k], g_hat);
      detail::accumulate_text_grad(feats[j][k], g_raw, *grad);
    }
  }
  return out;
}

/// L_zs + L_ft for a planned latteclip batch.
inline ObjectiveResult latte_objective(const EncoderParams& p, const PrototypeBank& bank,
                                       const BatchPlan& plan, const TrainConfig& cfg, Gradient* grad) {
  const Matrix u = detail::encode_batch(p, plan.samples);
  ObjectiveResult r;
  if (plan.zs) {
    r.zs = stream_objective(p, bank, plan.samples, u, *plan.zs, cfg, grad);
    r.total += r.zs->loss;
  }
  if (plan.ft) {
    r.ft = stream_objective(p, bank, plan.samples, u, *plan.ft, cfg, grad);
    r.total += r.ft->loss;
  }
  return r;
}

/// Template-text contrastive objective shared by flyp_pl and oracle.
inline double template_objective(const EncoderParams& p, const std::vector<const Sample*>& samples,
                                 const std::vector<std::size_t>& labels,
                                 const std::vector<std::string>& class_names, const TrainConfig& cfg,
                                 Gradient* grad) {
  const Matrix u = detail::encode_batch(p, samples);
  std::vector<TextFeaturization> feats;
  Matrix t(samples.size(), p.dim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    feats.push_back(featurize_text(render_class_text(class_names.at(labels[i])), p.vocab_size));
    t.set_row(i, encode_text(p, feats.back()));
  }
  const ContrastiveResult cr = contrastive_loss_with_grad(u, t, p.temperature());
  if (grad) {
    detail::accumulate_image_grad(samples, cr.grad_image, *grad);
    for (std::size_t i = 0; i < samples.size(); ++i) detail::accumulate_text_grad(feats[i], cr.grad_text.row(i), *grad);
    if (cfg.train_logit_scale) grad->logit_scale += cr.grad_inv_temperature * std::exp(p.logit_scale);
  }
  return cr.loss;
}

// ---- optimizer ------------------------------------------------------------------

/// Plain gradient descent, or AdamW with the usual contrastive-pretraining
/// betas (0.9, 0.98) and eps 1e-6.
struct OptimizerState {
  long t = 0;
  std::vector<double> m, v;  // flattened [image, text, logit_scale]

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

inline void apply_update(EncoderParams& p, const Gradient& g, const TrainConfig& cfg, OptimizerState& st) {
  if (cfg.optimizer == OptimizerKind::kSgd) {
    axpy(-cfg.learning_rate, g.image.data(), p.image_weights.data());
    axpy(-cfg.learning_rate, g.text.data(), p.text_weights.data());
    if (cfg.train_logit_scale) p.logit_scale -= cfg.learning_rate * g.logit_scale;
  } else {
    constexpr double b1 = 0.9, b2 = 0.98, eps = 1e-6;
    const std::size_t ni = p.image_weights.data().size(), nt = p.text_weights.data().size();
    if (st.m.empty()) {
      st.m.assign(ni + nt + 1, 0.0);
      st.v.assign(ni + nt + 1, 0.0);
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(b1, double(st.t)), c2 = 1.0 - std::pow(b2, double(st.t));
    auto step = [&](double& w, double grad, std::size_t idx, bool decay) {
      st.m[idx] = b1 * st.m[idx] + (1 - b1) * grad;
      st.v[idx] = b2 * st.v[idx] + (1 - b2) * grad * grad;
      if (decay) w -= cfg.learning_rate * cfg.weight_decay * w;
      w -= cfg.learning_rate * (st.m[idx] / c1) / (std::sqrt(st.v[idx] / c2) + eps);
    };
    for (std::size_t i = 0; i < ni; ++i) step(p.image_weights.data()[i], g.image.data()[i], i, true);
    for (std::size_t i = 0; i < nt; ++i) step(p.text_weights.data()[i], g.text.data()[i], ni + i, true);
    if (cfg.train_logit_scale) step(p.logit_scale, g.logit_scale, ni + nt, false);
  }
  p.clamp_logit_scale();
  if (!all_finite(p.image_weights.data()) || !all_finite(p.text_weights.data()))
    throw NumericError("encoder parameters diverged");
}

// ---- trainer ----------------------------------------------------------------------

struct StepReport {
  long step = 0;
  std::optional<double> loss_zs;
  std::optional<double> loss_ft;
  double total_loss = 0.0;
  double grad_norm = 0.0;
  std::size_t classes_updated = 0;
  double wall_ms = 0.0;
};

inline nlohmann::json report_to_json(const StepReport& r) {
  return {{"step", r.step},
          {"loss_zs", r.loss_zs ? nlohmann::json(*r.loss_zs) : nlohmann::json(nullptr)},
          {"loss_ft", r.loss_ft ? nlohmann::json(*r.loss_ft) : nlohmann::json(nullptr)},
          {"total_loss", r.total_loss},
          {"grad_norm", r.grad_norm},
          {"classes_updated", r.classes_updated},
          {"wall_ms", r.wall_ms}};
}

inline constexpr int kTrainerStateFormatVersion = 1;

/// Owns the live encoder, the frozen zero-shot snapshot, the prototype bank
/// and the optimizer. All mutation happens in step(), strictly after the
/// forward pass of that step.
class Trainer {
 public:
  /// `zs_labels` and `captions` are only consulted in latteclip mode.
  Trainer(TrainConfig cfg, std::vector<Sample> pool, std::vector<std::string> class_names,
          const EncoderParams& pretrained, LabelTable zs_labels = {}, CaptionIndex captions = {})
      : cfg_(std::move(cfg)),
        pool_(std::move(pool)),
        class_names_(std::move(class_names)),
        live_(pretrained),
        frozen_(snapshot(pretrained, 0)),
        zs_labels_(std::move(zs_labels)),
        captions_(std::move(captions)) {
    cfg_.validate();
    pretrained.validate();
    validate_class_names(class_names_);
    if (cfg_.mode == TrainMode::kLatteClip) {
      bank_ = init_from_class_texts(frozen_.params(), class_names_, cfg_.mu, cfg_.alpha);
      for (const auto& s : pool_) zs_labels_.at(s.image_id);  // fail fast on gaps
    }
    if (cfg_.mode == TrainMode::kOracle)
      for (const auto& s : pool_)
        if (!s.gt_label) throw ConfigError("oracle mode needs gt_label for '" + s.image_id + "'");
    build_schedule();
  }

  const TrainConfig& config() const { return cfg_; }
  const EncoderParams& live() const { return live_; }
  EncoderParams& mutable_live() { return live_; }
  const FrozenSnapshot& frozen() const { return frozen_; }
  const std::optional<PrototypeBank>& bank() const { return bank_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<Sample>& pool() const { return pool_; }
  const OptimizerState& optimizer_state() const { return opt_; }
  long steps_done() const { return step_; }
  long total_steps() const { return total_steps_; }
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::size_t epoch_size() const { return subset_.size(); }
  bool finished() const { return step_ >= total_steps_; }

  /// Pool indices of the batch consumed at `step`. Depends only on the seed,
  /// so a resumed run replays the same order.
  std::vector<std::size_t> batch_for_step(long step) const {
    const long epoch = step / long(batches_per_epoch_);
    const std::size_t b = std::size_t(step % long(batches_per_epoch_));
    std::vector<std::size_t> order = subset_;
    Rng rng(mix_seed(cfg_.seed, 0xe90c + std::uint64_t(epoch)));
    rng.shuffle(order);
    const std::size_t lo = b * cfg_.batch_size, hi = std::min(order.size(), lo + cfg_.batch_size);
    return {order.begin() + long(lo), order.begin() + long(hi)};
  }

  /// Runs the next scheduled step.
  StepReport step() {
    if (finished()) throw Error("training schedule already complete");
    return step(batch_for_step(step_));
  }

  StepReport step(const std::vector<std::size_t>& batch) {
    const auto t0 = std::chrono::steady_clock::now();
    StepReport r;
    r.step = step_;
    if (batch.empty()) {
      std::cerr << "warning: empty batch at step " << step_ << "; skipping\n";
      return r;
    }
    std::vector<const Sample*> samples;
    for (std::size_t i : batch) samples.push_back(&pool_.at(i));

    Gradient grad(live_);
    if (cfg_.mode == TrainMode::kLatteClip) {
      const BatchPlan plan = plan_batch(samples);
      const ObjectiveResult obj = latte_objective(live_, *bank_, plan, cfg_, &grad);
      if (obj.zs) r.loss_zs = obj.zs->loss;
      if (obj.ft) r.loss_ft = obj.ft->loss;
      r.total_loss = obj.total;
      r.grad_norm = grad.norm();
      apply_update(live_, grad, cfg_, opt_);
      r.classes_updated = update_bank(plan, obj);
    } else {
      const auto labels = template_labels(samples);
      r.loss_ft = template_objective(live_, samples, labels, class_names_, cfg_, &grad);
      r.total_loss = *r.loss_ft;
      r.grad_norm = grad.norm();
      apply_update(live_, grad, cfg_, opt_);
    }
    ++step_;
    if (bank_) bank_->step = step_;
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

  /// Pseudo-labels and description sets for a batch, against the current
  /// live encoder and bank.
  BatchPlan plan_batch(const std::vector<const Sample*>& samples) const {
    BatchPlan plan;
    plan.samples = samples;
    std::optional<TemplateClassifier> live_templates;
    if (cfg_.ft_label_source == LabelSource::kTemplates) live_templates.emplace(live_, class_names_);
    auto make_stream = [&](bool zero_shot) {
      StreamPlan sp;
      for (const Sample* s : samples) {
        std::size_t c;
        if (zero_shot)
          c = zs_labels_.at(s->image_id);
        else if (live_templates)
          c = live_templates->predict(s->features, s->image_id);
        else
          c = finetune_label(live_, *bank_, s->features, s->image_id);
        sp.labels.push_back(c);
        sp.descriptions.push_back(captions_.lookup(s->image_id, c, step_, cfg_.enabled_descriptions));
      }
      return sp;
    };
    if (cfg_.use_zs_loss) plan.zs = make_stream(true);
    if (cfg_.use_ft_loss) plan.ft = make_stream(false);
    return plan;
  }

  /// Labels for flyp_pl (live template classifier) or oracle (ground truth).
  std::vector<std::size_t> template_labels(const std::vector<const Sample*>& samples) const {
    std::vector<std::size_t> labels;
    if (cfg_.mode == TrainMode::kOracle) {
      for (const Sample* s : samples) labels.push_back(*s->gt_label);
    } else {
      const TemplateClassifier live_templates(live_, class_names_);
      for (const Sample* s : samples) labels.push_back(live_templates.predict(s->features, s->image_id));
    }
    return labels;
  }

  // ---- resumable state ----

  nlohmann::json state_to_json() const {
    nlohmann::json j{{"format_version", kTrainerStateFormatVersion},
                     {"mode", std::string(to_string(cfg_.mode))},
                     {"config", config_to_json(cfg_)},
                     {"step", step_},
                     {"encoder", encoder_to_json(live_)},
                     {"optimizer", {{"t", opt_.t}, {"m", opt_.m}, {"v", opt_.v}}}};
    j["prototypes"] = bank_ ? bank_to_json(*bank_) : nlohmann::json(nullptr);
    return j;
  }

  void restore(const nlohmann::json& j) {
    if (j.value("format_version", -1) != kTrainerStateFormatVersion)
      throw FormatError("trainer state format_version mismatch");
    if (j.at("config") != config_to_json(cfg_))
      throw ConfigError("resume checkpoint was written with a different train config");
    step_ = j.at("step").get<long>();
    live_ = encoder_from_json(j.at("encoder"));
    const auto& o = j.at("optimizer");
    opt_.t = o.at("t").get<long>();
    opt_.m = o.at("m").get<std::vector<double>>();
    opt_.v = o.at("v").get<std::vector<double>>();
    if (!j.at("prototypes").is_null()) bank_ = bank_from_json(j.at("prototypes"));
  }

 private:
  void build_schedule() {
    std::vector<std::size_t> all(pool_.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    Rng rng(mix_seed(cfg_.seed, 0xda7a));
    rng.shuffle(all);
    std::size_t keep = std::size_t(std::floor(cfg_.data_fraction * double(all.size())));
    keep = std::max(keep, std::min(cfg_.batch_size, all.size()));
    subset_.assign(all.begin(), all.begin() + long(keep));
    std::sort(subset_.begin(), subset_.end());
    batches_per_epoch_ = std::max<std::size_t>(1, (subset_.size() + cfg_.batch_size - 1) / cfg_.batch_size);
    total_steps_ = subset_.empty() ? 0 : std::min(cfg_.max_iterations, cfg_.max_epochs * long(batches_per_epoch_));
  }

  std::size_t update_bank(const BatchPlan& plan, const ObjectiveResult& obj) {
    std::set<std::size_t> touched;
    auto apply = [&](const StreamPlan& sp, const StreamOutcome& so, const StreamPlan* other) {
      std::vector<Assignment> as;
      for (std::size_t i = 0; i < sp.labels.size(); ++i) {
        if (other && cfg_.dedupe_streams && other->labels[i] == sp.labels[i]) continue;
        as.push_back({sp.labels[i], so.mixes[i].t_bar});
        touched.insert(sp.labels[i]);
      }
      batch_momentum_update(*bank_, as);
    };
    if (plan.zs) apply(*plan.zs, *obj.zs, nullptr);
    if (plan.ft) apply(*plan.ft, *obj.ft, plan.zs ? &*plan.zs : nullptr);
    return touched.size();
  }

  TrainConfig cfg_;
  std::vector<Sample> pool_;
  std::vector<std::string> class_names_;
  EncoderParams live_;
  FrozenSnapshot frozen_;
  LabelTable zs_labels_;
  CaptionIndex captions_;
  std::optional<PrototypeBank> bank_;
  OptimizerState opt_;
  long step_ = 0;
  std::vector<std::size_t> subset_;
  std::size_t batches_per_epoch_ = 1;
  long total_steps_ = 0;
};

// ---- loop + persistence ------------------------------------------------------------

struct TrainOutputs {
  std::filesystem::path dir;  // empty: keep everything in memory
  std::function<void(const StepReport&)> on_step;
};

inline void save_trainer_state(const Trainer& t, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << t.state_to_json().dump() << '\n';
  }
  std::filesystem::rename(tmp, path);
}

inline void load_trainer_state(Trainer& t, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("trainer state " + path.string(), "train");
  t.restore(nlohmann::json::parse(in));
}

/// Writes the final checkpoint pair: encoder.json, plus prototypes.json in
/// latteclip mode, plus a mode manifest.
inline void save_final_checkpoint(const Trainer& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_encoder(t.live(), dir / "encoder.json");
  if (t.bank()) save_bank(*t.bank(), dir / "prototypes.json");
  else std::filesystem::remove(dir / "prototypes.json");
  std::ofstream(dir / "checkpoint.json", std::ios::trunc)
      << nlohmann::json{{"format_version", 1},
                        {"mode", std::string(to_string(t.config().mode))},
                        {"step", t.steps_done()},
                        {"class_names", t.class_names()}}
             .dump()
      << '\n';
}

/// Runs the schedule to completion: no early stopping or model selection, the
/// last state is the result. With an output directory, metrics are appended
/// per step and resumable state is written at every epoch boundary.
inline std::vector<StepReport> train_loop(Trainer& t, const TrainOutputs& io = {}) {
  std::vector<StepReport> reports;
  std::ofstream metrics;
  if (!io.dir.empty()) {
    std::filesystem::create_directories(io.dir);
    metrics.open(io.dir / "metrics.jsonl", std::ios::app);
  }
  while (!t.finished()) {
    reports.push_back(t.step());
    if (io.on_step) io.on_step(reports.back());
    if (!io.dir.empty()) {
      metrics << report_to_json(reports.back()).dump() << '\n';
      metrics.flush();
      if (t.steps_done() % long(t.batches_per_epoch()) == 0 || t.finished())
        save_trainer_state(t, io.dir / "state.json");
    }
  }
  if (!io.dir.empty()) {
    save_trainer_state(t, io.dir / "state.json");
    save_final_checkpoint(t, io.dir);
  }
  return reports;
}

}  // namespace latte
