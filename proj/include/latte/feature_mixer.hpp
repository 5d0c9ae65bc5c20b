#pragma once

#include <algorithm>
#include <array>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latte/core_math.hpp"
#include "latte/encoders.hpp"
#include "latte/prompts.hpp"
#include "latte/prototype_bank.hpp"

namespace latte {

/// What the top-1 similarity is compared against when scoring a description.
enum class GapReference { kTop2, kMean, kMedian };

inline GapReference gap_reference_from_string(std::string_view s) {
  if (s == "top2") return GapReference::kTop2;
  if (s == "mean") return GapReference::kMean;
  if (s == "median") return GapReference::kMedian;
  throw ConfigError("gap_reference must be top2|mean|median, got '" + std::string(s) + "'");
}

inline std::string_view to_string(GapReference g) {
  switch (g) {
    case GapReference::kTop2: return "top2";
    case GapReference::kMean: return "mean";
    case GapReference::kMedian: return "median";
  }
  return "?";
}

/// Description weight expressed as a linear functional of the similarity row:
/// w = sum_c coef[c] * sims[c]. The coefficients make the weight
/// differentiable with respect to the text embedding when that is wanted.
struct WeightDetail {
  double w = 0.0;
  std::vector<double> coef;
};

/// Gap between the largest similarity and the reference statistic of the
/// remaining C-1 similarities. With kTop2 this is top1 - top2.
inline WeightDetail weight_from_similarities(std::span<const double> sims,
                                             GapReference ref = GapReference::kTop2) {
  const std::size_t n = sims.size();
  if (n < 2) throw ConfigError("description weighting needs at least two prototypes");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  WeightDetail d;
  d.coef.assign(n, 0.0);
  d.coef[order[0]] = 1.0;
  const std::size_t rest = n - 1;
  switch (ref) {
    case GapReference::kTop2:
      d.coef[order[1]] -= 1.0;
      break;
    case GapReference::kMean:
      for (std::size_t k = 1; k < n; ++k) d.coef[order[k]] -= 1.0 / double(rest);
      break;
    case GapReference::kMedian:
      if (rest % 2 == 1) {
        d.coef[order[1 + rest / 2]] -= 1.0;
      } else {
        d.coef[order[rest / 2]] -= 0.5;
        d.coef[order[rest / 2 + 1]] -= 0.5;
      }
      break;
  }
  for (std::size_t c = 0; c < n; ++c) d.w += d.coef[c] * sims[c];
  // Exact ties can leave -0.0 or a rounding residue below zero.
  d.w = std::max(d.w, 0.0);
  return d;
}

inline double compute_weight(std::span<const double> text_emb, const PrototypeBank& bank,
                             GapReference ref = GapReference::kTop2) {
  return weight_from_similarities(bank_similarities(text_emb, bank), ref).w;
}

/// Indexed by CaptionKind.
template <typename T>
using PerKind = std::array<T, 3>;

inline constexpr std::size_t kind_index(CaptionKind k) { return static_cast<std::size_t>(k); }
inline constexpr std::array<CaptionKind, 3> kAllKinds = {CaptionKind::kClass, CaptionKind::kImage,
                                                         CaptionKind::kGroup};

struct DescriptionSet {
  PerKind<std::string> texts;  // class, image, group
};

struct MixOptions {
  double alpha = 0.99;
  bool use_mixer = true;
  PerKind<bool> enabled = {true, true, true};
  GapReference gap_reference = GapReference::kTop2;
};

inline constexpr double kWeightSumFloor = 1e-12;

struct MixResult {
  Vector t_bar;
  PerKind<double> weights = {0.0, 0.0, 0.0};
  bool used_fallback = false;
  std::size_t cls = 0;

  // Intermediates kept for backpropagation through the text encoder.
  PerKind<Vector> normalized;   // unit text embeddings of enabled kinds
  PerKind<double> raw_norms = {0.0, 0.0, 0.0};
  PerKind<WeightDetail> details;
  double weight_sum = 0.0;
};

/// Weighted average of the enabled (already encoded) descriptions, blended with
/// the selected prototype: (1 - alpha) * sum w_i g_i / sum w_i + alpha * p_c.
/// `fixed_weights`, when given, replaces the computed description weights
/// (used to hold weights constant while probing gradients).
inline MixResult mix_embeddings(const PerKind<Vector>& raw_embeddings, const PrototypeBank& bank,
                                std::size_t cls, const MixOptions& opt,
                                const PerKind<double>* fixed_weights = nullptr) {
  if (cls >= bank.num_classes()) throw ConfigError("pseudo-label out of range");
  if (std::none_of(opt.enabled.begin(), opt.enabled.end(), [](bool b) { return b; }))
    throw ConfigError("at least one description kind must be enabled");
  MixResult r;
  r.cls = cls;
  for (CaptionKind k : kAllKinds) {
    const auto i = kind_index(k);
    if (!opt.enabled[i]) continue;
    r.raw_norms[i] = norm(raw_embeddings[i]);
    r.normalized[i] = l2_normalize(raw_embeddings[i]);
    if (fixed_weights) {
      r.weights[i] = (*fixed_weights)[i];
    } else if (opt.use_mixer) {
      r.details[i] = weight_from_similarities(bank_similarities(r.normalized[i], bank),
                                              opt.gap_reference);
      r.weights[i] = r.details[i].w;
    } else {
      r.weights[i] = 1.0;
    }
    r.weight_sum += r.weights[i];
  }
  if (!fixed_weights && r.weight_sum < kWeightSumFloor) {
    r.used_fallback = true;
    r.weight_sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      r.weights[i] = opt.enabled[i] ? 1.0 : 0.0;
      r.weight_sum += r.weights[i];
    }
  }
  const auto p = bank.prototype(cls);
  r.t_bar.assign(bank.dim(), 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    if (!opt.enabled[i]) continue;
    axpy((1.0 - opt.alpha) * r.weights[i] / r.weight_sum, r.normalized[i], r.t_bar);
  }
  axpy(opt.alpha, p, r.t_bar);
  if (!all_finite(r.t_bar)) throw NumericError("mixed embedding is not finite");
  return r;
}

inline MixResult mix(const DescriptionSet& descs, const EncoderParams& live, const PrototypeBank& bank,
                     std::size_t cls, const MixOptions& opt) {
  PerKind<Vector> raw;
  for (std::size_t i = 0; i < 3; ++i)
    if (opt.enabled[i]) raw[i] = encode_text(live, descs.texts[i]);
  return mix_embeddings(raw, bank, cls, opt);
}

struct PseudoLabelPair {
  std::size_t zs = 0;
  std::size_t ft = 0;
  friend bool operator==(const PseudoLabelPair&, const PseudoLabelPair&) = default;
};

/// Builds the description set for one image under one pseudo-label.
using DescriptionLookup = std::function<DescriptionSet(std::size_t cls)>;

/// One mix per pseudo-label stream: (zs, ft).
inline std::pair<MixResult, MixResult> mix_pair(const PseudoLabelPair& pair,
                                                const DescriptionLookup& lookup,
                                                const EncoderParams& live, const PrototypeBank& bank,
                                                const MixOptions& opt) {
  return {mix(lookup(pair.zs), live, bank, pair.zs, opt), mix(lookup(pair.ft), live, bank, pair.ft, opt)};
}

}  // namespace latte
