#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "latte/captions.hpp"
#include "latte/dataset.hpp"
#include "latte/eval.hpp"
#include "latte/feature_mixer.hpp"
#include "latte/pseudo_label.hpp"
#include "latte/toy.hpp"
#include "latte/trainer.hpp"

namespace latte {

struct DescribeOptions {
  std::string domain;
  PerKind<bool> kinds = {true, true, true};
  std::size_t group_size = 4;
  std::uint64_t seed = 0;
  std::size_t workers = 5;
  /// When set, groups are drawn by ground truth with exactly this many images
  /// (anchor included) sharing the anchor's true class.
  std::optional<std::size_t> correct_in_group;
};

/// Anchor, then n_correct - 1 images of the anchor's true class, then images
/// of other classes. Used to study how wrong group members affect captions.
inline GroupSpec sample_group_with_correct(const Sample& anchor, const std::vector<Sample>& pool, std::size_t k,
                                           std::size_t n_correct, std::uint64_t seed) {
  if (!valid_group_size(k)) throw ConfigError("group size must be one of 2, 4, 8, 16");
  if (n_correct < 1 || n_correct > k) throw ConfigError("correct-image count must be in [1, k]");
  if (!anchor.gt_label) throw ConfigError("correct-image groups need ground truth for '" + anchor.image_id + "'");
  std::vector<std::string> same, other;
  for (const auto& s : pool) {
    if (s.image_id == anchor.image_id || !s.gt_label) continue;
    (*s.gt_label == *anchor.gt_label ? same : other).push_back(s.image_id);
  }
  GroupSpec g;
  g.anchor_id = anchor.image_id;
  g.k = k;
  std::tie(g.rows, g.cols) = collage_layout(k);
  g.member_ids.push_back(anchor.image_id);
  Rng rng(seed);
  auto draw = [&](std::vector<std::string>& from, std::size_t count) {
    if (count == 0) return;
    if (from.empty()) throw ConfigError("not enough images to build a group for '" + anchor.image_id + "'");
    if (from.size() < count) g.with_replacement = true;
    for (std::size_t i = 0; i < count; ++i) {
      if (from.size() >= count) {
        const std::size_t j = i + rng.below(from.size() - i);
        std::swap(from[i], from[j]);
        g.member_ids.push_back(from[i]);
      } else {
        g.member_ids.push_back(from[rng.below(from.size())]);
      }
    }
  };
  draw(same, n_correct - 1);
  draw(other, k - n_correct);
  return g;
}

/// Work list for `describe`: class captions are rendered templates, image
/// captions are one per image, group captions one per (anchor, c_zs) with the
/// pool formed by zero-shot pseudo-labels.
inline std::vector<CaptionJob> build_caption_jobs(const std::vector<Sample>& pool,
                                                  const std::vector<std::string>& class_names,
                                                  const LabelTable& zs_labels, const DescribeOptions& opt) {
  std::vector<std::vector<std::string>> by_label(class_names.size());
  for (const auto& s : pool) by_label.at(zs_labels.at(s.image_id)).push_back(s.image_id);

  std::vector<CaptionJob> jobs;
  const std::string image_prompt = render_image_prompt(opt.domain);
  const std::string group_prompt = render_group_prompt(opt.domain);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Sample& s = pool[i];
    const std::size_t c = zs_labels.at(s.image_id);
    if (opt.kinds[kind_index(CaptionKind::kClass)]) {
      CaptionJob j;
      j.key = {s.image_id, CaptionKind::kClass, c};
      j.fixed_text = render_class_text(class_names[c]);
      jobs.push_back(std::move(j));
    }
    if (opt.kinds[kind_index(CaptionKind::kImage)]) {
      CaptionJob j;
      j.key = {s.image_id, CaptionKind::kImage, std::nullopt};
      j.request = {image_prompt, {s.image_id}, 1, 1};
      jobs.push_back(std::move(j));
    }
    if (opt.kinds[kind_index(CaptionKind::kGroup)]) {
      const std::uint64_t gseed = mix_seed(opt.seed, fnv1a64(s.image_id));
      const GroupSpec g = opt.correct_in_group
                              ? sample_group_with_correct(s, pool, opt.group_size, *opt.correct_in_group, gseed)
                              : sample_group(s.image_id, by_label[c], opt.group_size, gseed);
      CaptionJob j;
      j.key = {s.image_id, CaptionKind::kGroup, c};
      j.request = {group_prompt, g.member_ids, g.rows, g.cols};
      jobs.push_back(std::move(j));
    }
  }
  return jobs;
}

/// Stub captioner that can "see" every labeled image of the dataset.
inline std::unique_ptr<StubProvider> make_stub_provider(const Dataset& ds, std::uint64_t seed) {
  std::unordered_map<std::string, std::size_t> depicted;
  for (Split sp : {Split::kTrain, Split::kVal, Split::kTest})
    for (const auto& s : ds.split(sp))
      if (s.gt_label) depicted[s.image_id] = *s.gt_label;
  return std::make_unique<StubProvider>(ds.class_names, std::move(depicted),
                                        StubOptions{ds.caption_noise, seed, true});
}

/// Training recipe for the bundled toy benchmark. The toy encoder is tiny and
/// starts far from converged, so it needs a much larger step than the
/// real-scale defaults, and a lower alpha so prototypes can absorb captions
/// within a few hundred steps.
inline TrainConfig toy_train_config(std::uint64_t seed) {
  TrainConfig c;
  c.batch_size = 16;
  c.learning_rate = 0.3;
  c.max_iterations = 300;
  c.max_epochs = 50;
  c.alpha = 0.5;
  c.mu = 0.99;
  c.seed = seed;
  return c;
}

/// In-memory end-to-end run on a toy world: zero-shot labels, stub captions,
/// training, and test evaluation before and after.
struct ToyRunResult {
  double zero_shot_top1 = 0.0;
  EvalReport final_report;
  std::optional<PrototypeBank> bank;
  EncoderParams encoder;
  std::vector<StepReport> steps;
};

inline ToyRunResult run_toy_pipeline(const ToyWorld& world, const TrainConfig& cfg,
                                     std::optional<std::size_t> correct_in_group = std::nullopt,
                                     std::size_t workers = 1) {
  const Dataset& ds = world.dataset;
  const FrozenSnapshot frozen = snapshot(world.encoder);
  const auto pool = ds.training_pool();

  ToyRunResult out;
  const TemplateClassifier zs(frozen.params(), ds.class_names);
  out.zero_shot_top1 =
      evaluate(ds.test, ds.class_names.size(), [&](const Sample& s) { return zs.predict(s.features); }).top1;

  LabelTable zs_labels;
  CaptionIndex captions;
  if (cfg.mode == TrainMode::kLatteClip) {
    zs_labels = label_dataset(frozen, ds.class_names, pool);
    CaptionCache cache;
    auto stub = make_stub_provider(ds, cfg.seed);
    DescribeOptions dopt;
    dopt.domain = ds.domain;
    dopt.kinds = cfg.enabled_descriptions;
    dopt.group_size = cfg.group_size;
    dopt.seed = cfg.seed;
    dopt.correct_in_group = correct_in_group;
    const auto stats = run_caption_jobs(*stub, cache, build_caption_jobs(pool, ds.class_names, zs_labels, dopt),
                                        workers, {3, std::chrono::milliseconds(0)});
    if (stats.failed) throw GenerationFailed(stats.errors.front());
    captions = CaptionIndex(cache, ds.class_names, cfg.seed);
  }
  Trainer trainer(cfg, pool, ds.class_names, world.encoder, zs_labels, captions);
  out.steps = train_loop(trainer);

  Checkpoint ck;
  ck.mode = cfg.mode;
  ck.class_names = ds.class_names;
  ck.encoder = trainer.live();
  ck.bank = trainer.bank();
  ck.id = "memory@" + std::to_string(trainer.steps_done());
  out.final_report = evaluate(ds, Split::kTest, ck);
  out.bank = trainer.bank();
  out.encoder = trainer.live();
  return out;
}

/// Per-seed outcome of the toy benchmark.
struct ToySeedResult {
  std::uint64_t seed = 0;
  double zero_shot_top1 = 0.0;
  double final_top1 = 0.0;
};

/// Runs every seed with the same recipe; `adjust` may tweak the per-seed
/// config (used by ablations).
inline std::vector<ToySeedResult> run_toy_benchmark(const std::vector<std::uint64_t>& seeds,
                                                    const std::function<void(TrainConfig&)>& adjust = {},
                                                    const ToyConfig& base = {}) {
  std::vector<ToySeedResult> out;
  for (std::uint64_t seed : seeds) {
    ToyConfig tc = base;
    tc.seed = seed;
    const ToyWorld world = make_toy_world(tc);
    TrainConfig cfg = toy_train_config(seed);
    if (adjust) adjust(cfg);
    const ToyRunResult r = run_toy_pipeline(world, cfg);
    out.push_back({seed, r.zero_shot_top1, r.final_report.top1});
  }
  return out;
}

}  // namespace latte
