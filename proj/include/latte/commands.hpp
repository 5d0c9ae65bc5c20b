#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "latte/ablation.hpp"
#include "latte/pipeline.hpp"

namespace latte {

namespace fs = std::filesystem;

// ---- run directory ------------------------------------------------------------------

/// Fixed layout of a run directory. Everything a later subcommand needs is
/// found here by default, so the pipeline chains without extra flags.
struct RunDir {
  fs::path root;

  fs::path dataset() const { return root / "dataset"; }
  fs::path config() const { return root / "config.json"; }
  fs::path describe_config() const { return root / "describe.json"; }
  fs::path zs_labels() const { return root / "czs.jsonl"; }
  fs::path captions() const { return root / "captions.jsonl"; }
  fs::path checkpoint() const { return root / "checkpoint"; }
  fs::path eval_report(Split s) const { return root / ("eval_" + std::string(to_string(s)) + ".json"); }
  fs::path lock() const { return root / ".lock"; }
};

inline fs::path default_run_dir() {
  const char* env = std::getenv("LATTE_RUN_DIR");
  return env && *env ? fs::path(env) : fs::path("run");
}

/// Exclusive writer lock on a run directory, held for the object's lifetime.
class RunLock {
 public:
  explicit RunLock(const RunDir& run) : path_(run.lock()) {
    fs::create_directories(run.root);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST)
        throw Error("run directory " + run.root.string() + " is locked by another process (" + path_.string() +
                    "); remove the file if that process is gone");
      throw Error("cannot create lock " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (fd_ >= 0) ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---- canonical hashing ------------------------------------------------------------

namespace detail {

inline void drop_volatile(nlohmann::json& j) {
  if (j.is_object()) {
    for (const char* k : {"created_at", "provider", "wall_ms"}) j.erase(k);
    for (auto& [_, v] : j.items()) drop_volatile(v);
  } else if (j.is_array()) {
    for (auto& v : j) drop_volatile(v);
  }
}

inline std::string canonical_file(const fs::path& path) {
  const auto ext = path.extension().string();
  if (path.filename() == "captions.jsonl") return CaptionCache(path).canonical_dump();
  std::ifstream in(path, std::ios::binary);
  if (ext == ".jsonl") {
    std::string line, out;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      drop_volatile(j);
      out += j.dump() + "\n";
    }
    return out;
  }
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (ext == ".json") {
    auto j = nlohmann::json::parse(raw);
    drop_volatile(j);
    return j.dump();
  }
  return raw;
}

}  // namespace detail

/// Hash over every artifact in the directory, with timestamps, provider names
/// and wall-clock timings removed and caption records put in key order.
inline std::string canonical_run_hash(const fs::path& root, std::ostream* listing = nullptr) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      const auto name = e.path().filename().string();
      if (name == ".lock" || e.path().extension() == ".tmp") continue;
      files.push_back(fs::relative(e.path(), root));
    }
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& rel : files) {
    const std::string body = detail::canonical_file(root / rel);
    h = fnv1a64(rel.generic_string(), h);
    h = fnv1a64(std::string_view("\0", 1), h);
    h = fnv1a64(body, h);
    if (listing) {
      std::ostringstream hex;
      hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(body);
      *listing << hex.str() << "  " << rel.generic_string() << '\n';
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---- make-toy -------------------------------------------------------------------------

struct MakeToyOptions {
  ToyConfig toy;
  fs::path out;
};

/// Writes the dataset, the zero-shot encoder (pretrained.json) and the
/// matching training recipe (train_config.json).
inline void cmd_make_toy(const MakeToyOptions& opt, std::ostream& log) {
  const ToyWorld world = make_toy_world(opt.toy);
  save_dataset(world.dataset, opt.out);
  save_encoder(world.encoder, opt.out / "pretrained.json");
  write_json(opt.out / "train_config.json", config_to_json(toy_train_config(opt.toy.seed)));
  log << "wrote toy dataset '" << world.dataset.name << "' to " << opt.out.string() << ": "
      << world.dataset.class_names.size() << " classes, " << world.dataset.train.size() << " train, "
      << world.dataset.val.size() << " val, " << world.dataset.test.size() << " test\n";
}

// ---- pseudo-label ------------------------------------------------------------------

struct PseudoLabelOptions {
  fs::path dataset;
  fs::path pretrained;  // empty: <dataset>/pretrained.json
  fs::path out;
  bool force = false;
};

inline fs::path pretrained_path(const fs::path& dataset, const fs::path& given) {
  return given.empty() ? dataset / "pretrained.json" : given;
}

/// Loads the persisted zero-shot table, or computes and persists it. An
/// existing table is never recomputed unless forced; it must cover the pool.
inline LabelTable ensure_zs_labels(const PseudoLabelOptions& opt, std::ostream& log) {
  const Dataset ds = load_dataset(opt.dataset);
  const auto pool = ds.training_pool();
  if (!opt.force && fs::exists(opt.out)) {
    LabelTable t = load_label_table(opt.out);
    for (const auto& s : pool) t.at(s.image_id);
    log << "zero-shot labels already present (" << t.size() << " rows) in " << opt.out.string() << '\n';
    return t;
  }
  const EncoderParams enc = load_encoder(pretrained_path(opt.dataset, opt.pretrained));
  const LabelTable t = label_dataset(snapshot(enc), ds.class_names, pool);
  save_label_table(t, opt.out);
  log << "wrote " << t.size() << " zero-shot labels to " << opt.out.string() << '\n';
  return t;
}

// ---- describe ------------------------------------------------------------------------

struct DescribeCliOptions {
  fs::path dataset;
  fs::path pretrained;
  fs::path cache;
  fs::path zs_labels;
  fs::path snapshot;  // options record; empty: not written
  std::optional<std::string> domain;
  PerKind<bool> kinds = {true, true, true};
  std::size_t group_size = 4;
  std::size_t workers = 5;
  std::string provider = "stub";
  std::uint64_t seed = 0;
  std::optional<std::size_t> correct_in_group;
  RetryPolicy retry;
};

inline PerKind<bool> parse_kinds(const std::string& csv) {
  PerKind<bool> k = {false, false, false};
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) k[kind_index(caption_kind_from_string(item))] = true;
  if (std::none_of(k.begin(), k.end(), [](bool b) { return b; })) throw ConfigError("--kinds must name at least one kind");
  return k;
}

inline std::unique_ptr<CaptionProvider> make_provider(const std::string& name, const Dataset& ds, std::uint64_t seed) {
  if (name == "stub") return make_stub_provider(ds, seed);
  if (name == "external") return ExternalCommandProvider::from_env();
  throw BackendUnavailable("unknown caption provider '" + name + "' (stub|external)");
}

inline DescribeStats cmd_describe(const DescribeCliOptions& opt, std::ostream& log) {
  const Dataset ds = load_dataset(opt.dataset);
  if (!valid_group_size(opt.group_size)) throw ConfigError("--group-size must be one of 2, 4, 8, 16");
  auto provider = make_provider(opt.provider, ds, opt.seed);

  DescribeOptions d;
  d.domain = opt.domain.value_or(ds.domain);
  d.kinds = opt.kinds;
  d.group_size = opt.group_size;
  d.seed = opt.seed;
  d.workers = opt.workers;
  d.correct_in_group = opt.correct_in_group;
  if (!opt.snapshot.empty()) {
    nlohmann::json kinds = nlohmann::json::array();
    for (CaptionKind k : kAllKinds)
      if (d.kinds[kind_index(k)]) kinds.push_back(std::string(to_string(k)));
    write_json(opt.snapshot, {{"format_version", 1},
                              {"domain", d.domain},
                              {"kinds", kinds},
                              {"group_size", d.group_size},
                              {"seed", d.seed},
                              {"provider", opt.provider},
                              {"correct_in_group", opt.correct_in_group ? nlohmann::json(*opt.correct_in_group)
                                                                        : nlohmann::json(nullptr)}});
  }

  const LabelTable zs = ensure_zs_labels({opt.dataset, opt.pretrained, opt.zs_labels, false}, log);
  CaptionCache cache(opt.cache);
  if (cache.corrupt_count()) log << "skipped " << cache.corrupt_count() << " malformed cache lines\n";
  const auto jobs = build_caption_jobs(ds.training_pool(), ds.class_names, zs, d);
  const DescribeStats stats = run_caption_jobs(*provider, cache, jobs, opt.workers, opt.retry);
  log << "captions: " << stats.requested << " requested, " << stats.generated << " generated, " << stats.cached
      << " cached, " << stats.failed << " failed\n";
  if (stats.failed)
    throw GenerationFailed(std::to_string(stats.failed) + " captions failed (first: " + stats.errors.front() +
                           "); rerun describe to resume");
  return stats;
}

// ---- train ------------------------------------------------------------------------------

struct TrainCliOptions {
  fs::path dataset;
  fs::path pretrained;
  std::optional<fs::path> config;  // default: <dataset>/train_config.json, else built-in defaults
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> resume;  // explicit state file; otherwise the run's own state is reused
  RunDir run;
};

inline TrainConfig resolve_train_config(const TrainCliOptions& opt) {
  TrainConfig cfg;
  if (opt.config) {
    if (!fs::exists(*opt.config)) throw ConfigError("config file " + opt.config->string() + " does not exist");
    cfg = config_from_json(read_json(*opt.config));
  } else if (fs::exists(opt.dataset / "train_config.json")) {
    cfg = config_from_json(read_json(opt.dataset / "train_config.json"));
  }
  if (opt.seed) cfg.seed = *opt.seed;
  cfg.validate();
  return cfg;
}

/// Drops metric records at or beyond `step` so a resumed run does not repeat them.
inline void truncate_metrics(const fs::path& path, long step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line))
    if (!line.empty() && nlohmann::json::parse(line).at("step").get<long>() < step) kept += line + "\n";
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

struct TrainOutcome {
  long steps_done = 0;
  long total_steps = 0;
  bool resumed = false;
};

inline TrainOutcome cmd_train(const TrainCliOptions& opt, std::ostream& log) {
  const TrainConfig cfg = resolve_train_config(opt);
  const nlohmann::json cfg_json = config_to_json(cfg);
  if (fs::exists(opt.run.config()) && read_json(opt.run.config()) != cfg_json)
    throw ConfigError("run directory " + opt.run.root.string() +
                      " already holds a different config.json; use a fresh --run-dir");
  write_json(opt.run.config(), cfg_json);

  const Dataset ds = load_dataset(opt.dataset);
  const EncoderParams pretrained = load_encoder(pretrained_path(opt.dataset, opt.pretrained));
  const auto pool = ds.training_pool();

  LabelTable zs;
  CaptionIndex captions;
  if (cfg.mode == TrainMode::kLatteClip) {
    // describe also writes the label table, so it is the first thing to ask for.
    if (!fs::exists(opt.run.captions())) throw MissingArtifact("caption cache " + opt.run.captions().string(), "describe");
    if (!fs::exists(opt.run.zs_labels()))
      throw MissingArtifact("zero-shot label table " + opt.run.zs_labels().string(), "pseudo-label");
    zs = load_label_table(opt.run.zs_labels());
    const CaptionCache cache(opt.run.captions());
    captions = CaptionIndex(cache, ds.class_names, cfg.seed);
    if (cfg.enabled_descriptions[kind_index(CaptionKind::kImage)])
      for (const auto& s : pool)
        if (!captions.has_image_caption(s.image_id))
          throw MissingArtifact("image caption for '" + s.image_id + "'", "describe --kinds image");
    if (cfg.enabled_descriptions[kind_index(CaptionKind::kGroup)])
      for (std::size_t c = 0; c < ds.class_names.size(); ++c)
        if (captions.group_pool_size(c) == 0)
          throw MissingArtifact("group captions for class " + std::to_string(c) + " ('" + ds.class_names[c] + "')",
                                "describe --kinds group");
  }

  Trainer trainer(cfg, pool, ds.class_names, pretrained, zs, captions);
  TrainOutcome out;
  const fs::path own_state = opt.run.checkpoint() / "state.json";
  if (opt.resume) {
    load_trainer_state(trainer, *opt.resume);
    out.resumed = true;
  } else if (fs::exists(own_state)) {
    load_trainer_state(trainer, own_state);
    out.resumed = true;
  }
  if (out.resumed) {
    log << "resuming at step " << trainer.steps_done() << " of " << trainer.total_steps() << '\n';
    truncate_metrics(opt.run.checkpoint() / "metrics.jsonl", trainer.steps_done());
  }
  train_loop(trainer, {opt.run.checkpoint(), [&](const StepReport& r) {
                         if (r.step % 50 == 0)
                           log << "step " << r.step << " loss " << r.total_loss << " grad " << r.grad_norm << '\n';
                       }});
  out.steps_done = trainer.steps_done();
  out.total_steps = trainer.total_steps();
  log << "trained " << out.steps_done << " steps (" << to_string(cfg.mode) << "); checkpoint in "
      << opt.run.checkpoint().string() << '\n';
  return out;
}

// ---- eval ------------------------------------------------------------------------------

struct EvalCliOptions {
  fs::path checkpoint;
  fs::path dataset;
  Split split = Split::kTest;
  fs::path out;  // empty: not written
};

inline EvalReport cmd_eval(const EvalCliOptions& opt, std::ostream& log) {
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const Dataset ds = load_dataset(opt.dataset);
  const EvalReport r = evaluate(ds, opt.split, ck);
  if (!opt.out.empty()) write_json(opt.out, eval_to_json(r));
  log << eval_table(r, ds.class_names);
  return r;
}

}  // namespace latte
