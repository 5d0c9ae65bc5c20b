#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "latte/captions.hpp"
#include "latte/dataset.hpp"
#include "latte/encoders.hpp"
#include "latte/pseudo_label.hpp"
#include "latte/random.hpp"

namespace latte {

/// Desk-scale synthetic benchmark: gaussian clusters around well-separated
/// class means plus a "pre-trained" linear dual encoder whose class-name token
/// rows are deliberately corrupted, so zero-shot accuracy sits near a target.
struct ToyConfig {
  std::size_t classes = 5;
  std::size_t input_dim = 16;
  std::size_t embed_dim = 8;
  std::size_t vocab_size = 1024;
  std::size_t train_per_class = 40;
  std::size_t val_per_class = 0;
  std::size_t test_per_class = 20;
  double cluster_spread = 0.35;
  double caption_noise = 0.3;
  double zs_target_accuracy = 0.6;
  double filler_norm = 0.25;
  /// Norm of the direction shared by the stub's boilerplate caption words.
  double generic_norm = 3.0;
  /// Norm of the class-specific attribute-word rows.
  double attribute_norm = 1.0;
  /// Norm of the stub's noise-word rows (hallucinated content).
  double noise_word_norm = 4.0;
  std::uint64_t seed = 0;
  std::string name = "toy";
  std::string domain = "scene";
};

inline const std::vector<std::string>& toy_class_vocabulary() {
  static const std::vector<std::string> names = {
      "forest",  "river",     "highway", "pasture",  "industrial", "residential", "meadow",
      "desert",  "glacier",   "harbor",  "vineyard", "orchard",    "marsh",       "canyon",
      "lagoon",  "quarry",    "airport", "stadium",  "railway",    "bridge",      "village",
      "volcano", "reef",      "tundra",  "savanna",  "plateau",    "delta",       "dune",
      "island",  "waterfall", "cliff",   "prairie"};
  return names;
}

struct ToyWorld {
  Dataset dataset;
  Matrix class_means;      // C x input_dim, unit rows
  EncoderParams encoder;   // the zero-shot model
  double corruption = 0.0; // blend weight used for class-name rows
};

namespace detail {

inline Vector random_unit(Rng& rng, std::size_t dim) {
  Vector v(dim);
  for (double& x : v) x = rng.normal();
  return l2_normalize(v);
}

inline double train_zero_shot_accuracy(const EncoderParams& enc, const Dataset& ds) {
  const TemplateClassifier zs(enc, ds.class_names);
  std::size_t correct = 0;
  for (const auto& s : ds.train) correct += zs.predict(s.features) == *s.gt_label;
  return ds.train.empty() ? 0.0 : double(correct) / double(ds.train.size());
}

}  // namespace detail

/// Class means on the unit sphere with pairwise cosine < 0.5 (rejection
/// sampled), samples = mean + N(0, spread^2 I). Ground truth is always exact.
inline Dataset make_toy_dataset(const ToyConfig& cfg, Matrix* means_out = nullptr) {
  if (cfg.classes < 2) throw ConfigError("toy dataset needs at least two classes");
  Rng rng(mix_seed(cfg.seed, 0x70c1));
  Matrix means(cfg.classes, cfg.input_dim);
  std::size_t accepted = 0;
  for (std::size_t tries = 0; accepted < cfg.classes; ++tries) {
    if (tries >= 10000)
      throw ConfigError("could not place " + std::to_string(cfg.classes) +
                        " well-separated class means; lower the class count or raise input_dim");
    const Vector cand = detail::random_unit(rng, cfg.input_dim);
    bool ok = true;
    for (std::size_t c = 0; c < accepted && ok; ++c) ok = dot(cand, means.row(c)) < 0.5;
    if (ok) means.set_row(accepted++, cand);
  }

  Dataset ds;
  ds.name = cfg.name;
  ds.domain = cfg.domain;
  ds.feature_dim = cfg.input_dim;
  ds.caption_noise = cfg.caption_noise;
  for (std::size_t c = 0; c < cfg.classes; ++c)
    ds.class_names.push_back(c < toy_class_vocabulary().size() ? toy_class_vocabulary()[c]
                                                               : "class" + std::to_string(c));
  auto fill = [&](std::vector<Sample>& out, std::size_t per_class, std::string_view prefix) {
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < cfg.classes; ++c) {
        Sample s;
        s.image_id = std::string(prefix) + "-" + std::to_string(out.size());
        s.features.resize(cfg.input_dim);
        for (std::size_t k = 0; k < cfg.input_dim; ++k)
          s.features[k] = means(c, k) + cfg.cluster_spread * rng.normal();
        s.gt_label = c;
        out.push_back(std::move(s));
      }
  };
  fill(ds.train, cfg.train_per_class, "train");
  fill(ds.val, cfg.val_per_class, "val");
  fill(ds.test, cfg.test_per_class, "test");
  if (means_out) *means_out = means;
  return ds;
}

/// Builds the zero-shot encoder for a toy dataset.
///
/// The image map is random. Class-name token rows lean toward the next
/// class's clean direction, normalize((1 - b) * clean_c + b * clean_{c+1}),
/// with b found by bisection so zero-shot train accuracy lands near
/// cfg.zs_target_accuracy; confusions are then spread evenly over classes.
/// Stub attribute words keep clean class directions, and the stub's
/// boilerplate words share the domain centroid direction.
inline EncoderParams make_toy_encoder(const ToyConfig& cfg, const Dataset& ds, const Matrix& means,
                                      double* corruption_out = nullptr) {
  Rng rng(mix_seed(cfg.seed, 0xe4c0));
  EncoderParams enc(cfg.embed_dim, cfg.input_dim, cfg.vocab_size);
  for (double& w : enc.image_weights.data()) w = rng.normal() / std::sqrt(double(cfg.input_dim));
  for (double& w : enc.text_weights.data()) w = cfg.filler_norm * rng.normal() / std::sqrt(double(cfg.embed_dim));

  std::vector<Vector> clean(cfg.classes);
  Vector centroid(cfg.embed_dim, 0.0);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    clean[c] = l2_normalize(encode_image(enc, means.row(c)));
    axpy(1.0, clean[c], centroid);
  }
  centroid = l2_normalize(centroid);

  for (const auto& w : stub_noise_words()) {
    const Vector v = detail::random_unit(rng, cfg.embed_dim);
    for (std::size_t k = 0; k < cfg.embed_dim; ++k)
      enc.text_weights(token_bucket(w, cfg.vocab_size), k) = cfg.noise_word_norm * v[k];
  }
  for (const char* w : {"with", "distinctive", "features", "photos", "of", "2", "4", "8", "16"})
    for (std::size_t k = 0; k < cfg.embed_dim; ++k)
      enc.text_weights(token_bucket(w, cfg.vocab_size), k) = cfg.generic_norm * centroid[k] / 3.0;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    Vector row = clean[c];
    for (double& x : row) x *= cfg.attribute_norm;
    enc.text_weights.set_row(token_bucket(stub_attribute_word(ds.class_names[c]), cfg.vocab_size), row);
  }

  auto set_names = [&](double b) {
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      const Vector& next = clean[(c + 1) % cfg.classes];
      Vector row(cfg.embed_dim);
      for (std::size_t k = 0; k < cfg.embed_dim; ++k) row[k] = (1.0 - b) * clean[c][k] + b * next[k];
      enc.text_weights.set_row(token_bucket(ds.class_names[c], cfg.vocab_size), l2_normalize(row));
    }
  };
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    set_names(mid);
    if (detail::train_zero_shot_accuracy(enc, ds) > cfg.zs_target_accuracy)
      lo = mid;
    else
      hi = mid;
  }
  set_names(lo);
  if (corruption_out) *corruption_out = lo;
  return enc;
}

inline ToyWorld make_toy_world(const ToyConfig& cfg) {
  ToyWorld w;
  w.dataset = make_toy_dataset(cfg, &w.class_means);
  w.encoder = make_toy_encoder(cfg, w.dataset, w.class_means, &w.corruption);
  return w;
}

}  // namespace latte
