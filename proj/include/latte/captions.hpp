#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "latte/errors.hpp"
#include "latte/prompts.hpp"
#include "latte/random.hpp"
#include "latte/text_features.hpp"

namespace latte {

inline constexpr int kCaptionFormatVersion = 1;

// ---- collage groups -----------------------------------------------------------

/// Pseudo-label-grouped image set rendered as one near-square collage. The
/// anchor always sits at grid position (0, 0), i.e. member_ids[0].
struct GroupSpec {
  std::string anchor_id;
  std::vector<std::string> member_ids;
  std::size_t k = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool with_replacement = false;
};

inline bool valid_group_size(std::size_t k) { return k == 2 || k == 4 || k == 8 || k == 16; }

inline std::pair<std::size_t, std::size_t> collage_layout(std::size_t k) {
  auto rows = static_cast<std::size_t>(std::floor(std::sqrt(double(k))));
  rows = std::max<std::size_t>(rows, 1);
  return {rows, (k + rows - 1) / rows};
}

/// Anchor plus k-1 members drawn uniformly without replacement from the pool
/// (anchor excluded). Small pools fall back to drawing with replacement.
inline GroupSpec sample_group(const std::string& anchor_id, const std::vector<std::string>& class_pool,
                              std::size_t k, std::uint64_t seed) {
  if (!valid_group_size(k)) throw ConfigError("group size must be one of 2, 4, 8, 16");
  if (class_pool.empty()) throw ConfigError("group pool for '" + anchor_id + "' is empty");
  std::vector<std::string> others;
  for (const auto& id : class_pool)
    if (id != anchor_id) others.push_back(id);

  GroupSpec g;
  g.anchor_id = anchor_id;
  g.k = k;
  std::tie(g.rows, g.cols) = collage_layout(k);
  g.member_ids.push_back(anchor_id);
  Rng rng(seed);
  if (others.size() >= k - 1) {
    for (std::size_t i = 0; i + 1 < k; ++i) {
      const std::size_t j = i + rng.below(others.size() - i);
      std::swap(others[i], others[j]);
      g.member_ids.push_back(others[i]);
    }
  } else {
    g.with_replacement = true;
    for (std::size_t i = 0; i + 1 < k; ++i)
      g.member_ids.push_back(others.empty() ? anchor_id : others[rng.below(others.size())]);
  }
  return g;
}

// ---- records and cache ------------------------------------------------------------

struct CaptionKey {
  std::string image_id;
  CaptionKind kind = CaptionKind::kImage;
  std::optional<std::size_t> class_id;

  auto tie() const { return std::tie(image_id, kind, class_id); }
  friend bool operator==(const CaptionKey& a, const CaptionKey& b) { return a.tie() == b.tie(); }
  friend bool operator<(const CaptionKey& a, const CaptionKey& b) { return a.tie() < b.tie(); }
};

struct CaptionRecord {
  std::string image_id;
  CaptionKind kind = CaptionKind::kImage;
  std::optional<std::size_t> class_id;
  std::string text;
  std::vector<std::string> group_member_ids;
  std::string provider;
  std::string created_at;

  CaptionKey key() const { return {image_id, kind, class_id}; }
  friend bool operator==(const CaptionRecord&, const CaptionRecord&) = default;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json caption_to_json(const CaptionRecord& r) {
  nlohmann::json j{{"image_id", r.image_id},
                   {"kind", std::string(to_string(r.kind))},
                   {"class_id", nullptr},
                   {"text", r.text},
                   {"group_member_ids", r.group_member_ids},
                   {"provider", r.provider},
                   {"created_at", r.created_at},
                   {"format_version", kCaptionFormatVersion}};
  if (r.class_id) j["class_id"] = *r.class_id;
  return j;
}

inline CaptionRecord caption_from_json(const nlohmann::json& j) {
  if (j.at("format_version").get<int>() != kCaptionFormatVersion)
    throw FormatError("caption record format_version mismatch");
  CaptionRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.kind = caption_kind_from_string(j.at("kind").get<std::string>());
  if (!j.at("class_id").is_null()) r.class_id = j.at("class_id").get<std::size_t>();
  r.text = j.at("text").get<std::string>();
  r.group_member_ids = j.at("group_member_ids").get<std::vector<std::string>>();
  r.provider = j.at("provider").get<std::string>();
  r.created_at = j.at("created_at").get<std::string>();
  if (r.kind == CaptionKind::kImage && r.class_id)
    throw FormatError("image captions carry no class_id");
  if (r.kind != CaptionKind::kImage && !r.class_id)
    throw FormatError(std::string(to_string(r.kind)) + " caption without class_id");
  if (r.kind == CaptionKind::kGroup &&
      std::find(r.group_member_ids.begin(), r.group_member_ids.end(), r.image_id) ==
          r.group_member_ids.end())
    throw FormatError("group caption members must include the anchor");
  return r;
}

/// Append-only caption log with last-writer-wins per (image_id, kind, class_id).
/// Writes are serialized; readers share a lock and observe a consistent prefix.
class CaptionCache {
 public:
  CaptionCache() = default;

  /// Opens (and replays) the log at `path`; a missing file starts empty.
  explicit CaptionCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        insert_locked(caption_from_json(nlohmann::json::parse(line)));
      } catch (const std::exception& e) {
        ++corrupt_;
        std::cerr << "warning: " << path_.string() << ":" << lineno
                  << ": skipping malformed caption record (" << e.what() << ")\n";
      }
    }
  }

  CaptionCache(const CaptionCache&) = delete;
  CaptionCache& operator=(const CaptionCache&) = delete;

  void put(const CaptionRecord& r) {
    std::unique_lock lock(mu_);
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::binary | std::ios::app);
      if (!out) throw Error("cannot append to caption cache " + path_.string());
      out << caption_to_json(r).dump() << '\n';
    }
    insert_locked(r);
  }

  std::optional<CaptionRecord> get(const CaptionKey& key) const {
    std::shared_lock lock(mu_);
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return log_[it->second];
  }

  bool contains(const CaptionKey& key) const {
    std::shared_lock lock(mu_);
    return index_.count(key) != 0;
  }

  /// Live records (latest per key) matching the filter, in insertion order of
  /// their latest write.
  std::vector<CaptionRecord> scan(std::optional<CaptionKind> kind = std::nullopt,
                                  std::optional<std::size_t> class_id = std::nullopt) const {
    std::shared_lock lock(mu_);
    std::vector<CaptionRecord> out;
    for (std::size_t i = 0; i < log_.size(); ++i) {
      const auto& r = log_[i];
      if (index_.at(r.key()) != i) continue;
      if (kind && r.kind != *kind) continue;
      if (class_id && r.class_id != class_id) continue;
      out.push_back(r);
    }
    return out;
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return index_.size();
  }
  std::size_t corrupt_count() const { return corrupt_; }
  const std::filesystem::path& path() const { return path_; }

  /// Compacts the log file to the live records.
  void rewrite() {
    const auto live = scan();
    std::unique_lock lock(mu_);
    if (!path_.empty()) {
      const auto tmp = path_.string() + ".tmp";
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        for (const auto& r : live) out << caption_to_json(r).dump() << '\n';
      }
      std::filesystem::rename(tmp, path_);
    }
    log_ = live;
    index_.clear();
    for (std::size_t i = 0; i < log_.size(); ++i) index_[log_[i].key()] = i;
  }

  /// Sorted by key with provider and timestamps dropped; used for equality
  /// and determinism hashing.
  std::string canonical_dump() const {
    auto live = scan();
    std::sort(live.begin(), live.end(),
              [](const CaptionRecord& a, const CaptionRecord& b) { return a.key() < b.key(); });
    std::string out;
    for (const auto& r : live) {
      auto j = caption_to_json(r);
      j.erase("provider");
      j.erase("created_at");
      out += j.dump();
      out += '\n';
    }
    return out;
  }

 private:
  void insert_locked(const CaptionRecord& r) {
    log_.push_back(r);
    index_[r.key()] = log_.size() - 1;
  }

  std::filesystem::path path_;
  mutable std::shared_mutex mu_;
  std::vector<CaptionRecord> log_;
  std::map<CaptionKey, std::size_t> index_;
  std::size_t corrupt_ = 0;
};

// ---- providers ------------------------------------------------------------------

struct GenerationRequest {
  std::string prompt;
  std::vector<std::string> image_ids;  // collage order, row-major
  std::size_t rows = 1;
  std::size_t cols = 1;
};

/// A multimodal captioner. Implementations must be safe to call concurrently.
class CaptionProvider {
 public:
  virtual ~CaptionProvider() = default;
  virtual std::string name() const = 0;
  virtual std::string generate(const GenerationRequest& request) = 0;
};

/// Class-specific descriptive word the stub uses ("forest" -> "forestlike").
inline std::string stub_attribute_word(std::string_view class_name) {
  std::string w;
  for (const auto& tok : tokenize(class_name)) w += tok;
  return w + "like";
}

inline const std::vector<std::string>& stub_noise_words() {
  static const std::vector<std::string> words = {
      "blurry", "bright", "dark",  "small",   "large",  "outdoor",
      "indoor", "vivid",  "muted", "distant", "closeup", "cluttered"};
  return words;
}

struct StubOptions {
  double noise = 0.0;
  std::uint64_t seed = 0;
  bool attribute_words = true;
};

/// Deterministic captioner for offline runs. It "sees" an image through a
/// lookup of the class actually depicted; with probability `noise` it
/// describes a different class and adds a filler word instead.
class StubProvider : public CaptionProvider {
 public:
  StubProvider(std::vector<std::string> class_names,
               std::unordered_map<std::string, std::size_t> depicted, StubOptions opt = {})
      : class_names_(std::move(class_names)), depicted_(std::move(depicted)), opt_(opt) {}

  std::string name() const override { return "stub"; }

  std::atomic<std::size_t>& calls() { return calls_; }

  std::string generate(const GenerationRequest& req) override {
    ++calls_;
    if (req.image_ids.empty()) throw GenerationFailed("stub: request has no images");
    std::uint64_t h = fnv1a64(req.prompt);
    for (const auto& id : req.image_ids) h = fnv1a64(id, h ^ 0x2f);
    Rng rng(mix_seed(opt_.seed, h));

    // Majority depicted class; the anchor breaks ties.
    std::vector<std::size_t> votes(class_names_.size(), 0);
    std::optional<std::size_t> anchor_cls;
    for (const auto& id : req.image_ids) {
      auto it = depicted_.find(id);
      if (it == depicted_.end()) continue;
      ++votes[it->second];
      if (!anchor_cls) anchor_cls = it->second;
    }
    if (!anchor_cls) {
      return "a " + stub_noise_words()[rng.below(stub_noise_words().size())] + " scene";
    }
    std::size_t cls = *anchor_cls;
    for (std::size_t c = 0; c < votes.size(); ++c)
      if (votes[c] > votes[cls]) cls = c;

    const bool noisy = rng.uniform() < opt_.noise;
    if (noisy && class_names_.size() > 1) {
      cls = (cls + 1 + rng.below(class_names_.size() - 1)) % class_names_.size();
    }
    std::string text;
    if (req.image_ids.size() > 1) text += std::to_string(req.image_ids.size()) + " photos of ";
    text += class_names_[cls] + " with distinctive features";
    if (opt_.attribute_words) text += " " + stub_attribute_word(class_names_[cls]);
    if (noisy) text += " " + stub_noise_words()[rng.below(stub_noise_words().size())];
    return "  " + text + " \n";
  }

 private:
  std::vector<std::string> class_names_;
  std::unordered_map<std::string, std::size_t> depicted_;
  StubOptions opt_;
  std::atomic<std::size_t> calls_{0};
};

/// Shells out to the command in LATTE_LMM_COMMAND, passing the path of a JSON
/// request {prompt, image_ids, rows, cols}. Stdout is the caption.
class ExternalCommandProvider : public CaptionProvider {
 public:
  explicit ExternalCommandProvider(std::string command) : command_(std::move(command)) {
    if (command_.empty())
      throw BackendUnavailable("external captioner needs LATTE_LMM_COMMAND to name a command");
  }

  static std::unique_ptr<ExternalCommandProvider> from_env() {
    const char* cmd = std::getenv("LATTE_LMM_COMMAND");
    return std::make_unique<ExternalCommandProvider>(cmd ? cmd : "");
  }

  std::string name() const override { return "external"; }

  std::string generate(const GenerationRequest& req) override {
    const auto dir = std::filesystem::temp_directory_path();
    std::ostringstream fname;
    fname << "latte_req_" << std::this_thread::get_id() << "_" << counter_++ << ".json";
    const auto req_path = dir / fname.str();
    {
      std::ofstream out(req_path);
      out << nlohmann::json{{"prompt", req.prompt},
                            {"image_ids", req.image_ids},
                            {"rows", req.rows},
                            {"cols", req.cols}}
                 .dump();
    }
    const std::string cmd = command_ + " '" + req_path.string() + "'";
    std::FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) throw GenerationFailed("cannot start '" + command_ + "'");
    std::string output;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) output.append(buf, n);
    const int status = ::pclose(pipe);
    std::filesystem::remove(req_path);
    if (status != 0) throw GenerationFailed("'" + command_ + "' exited with status " + std::to_string(status));
    return output;
  }

 private:
  std::string command_;
  std::atomic<std::uint64_t> counter_{0};
};

// ---- generation -------------------------------------------------------------------

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds backoff_base{1000};
};

inline std::string strip(std::string_view s) {
  const auto ws = " \t\r\n\v\f";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

/// One cache entry to fill. `request` is unused for class-kind items, whose
/// text is the rendered template.
struct CaptionJob {
  CaptionKey key;
  GenerationRequest request;
  std::string fixed_text;  // set for class-kind items
};

/// Returns the cached caption for `job.key`, or asks the provider (with
/// retries), stores the stripped result, and returns it.
inline std::string generate(CaptionProvider& provider, CaptionCache& cache, const CaptionJob& job,
                            const RetryPolicy& retry = {}) {
  if (auto hit = cache.get(job.key)) return hit->text;
  CaptionRecord rec;
  rec.image_id = job.key.image_id;
  rec.kind = job.key.kind;
  rec.class_id = job.key.class_id;
  if (job.key.kind == CaptionKind::kGroup) rec.group_member_ids = job.request.image_ids;
  if (job.key.kind == CaptionKind::kClass) {
    rec.text = job.fixed_text;
    rec.provider = "template";
  } else {
    std::string last_error;
    bool ok = false;
    for (int attempt = 0; attempt < retry.max_attempts; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(retry.backoff_base * (1 << (attempt - 1)));
      try {
        rec.text = strip(provider.generate(job.request));
        ok = true;
        break;
      } catch (const std::exception& e) {
        last_error = e.what();
      }
    }
    if (!ok)
      throw GenerationFailed(job.key.image_id + "/" + std::string(to_string(job.key.kind)) + " after " +
                             std::to_string(retry.max_attempts) + " attempts: " + last_error);
    rec.provider = provider.name();
  }
  rec.created_at = utc_timestamp();
  cache.put(rec);
  return rec.text;
}

struct DescribeStats {
  std::size_t requested = 0;
  std::size_t generated = 0;
  std::size_t cached = 0;
  std::size_t failed = 0;
  std::vector<std::string> errors;
};

/// Runs `jobs` on a bounded worker pool. Failed items are reported after the
/// pool drains; everything that succeeded is already in the cache, so a rerun
/// resumes where this one stopped.
inline DescribeStats run_caption_jobs(CaptionProvider& provider, CaptionCache& cache,
                                      const std::vector<CaptionJob>& jobs, std::size_t workers,
                                      const RetryPolicy& retry = {}) {
  DescribeStats stats;
  stats.requested = jobs.size();
  std::atomic<std::size_t> next{0}, generated{0}, cached{0};
  std::mutex err_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      if (cache.contains(jobs[i].key)) {
        ++cached;
        continue;
      }
      try {
        generate(provider, cache, jobs[i], retry);
        ++generated;
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mu);
        stats.errors.push_back(e.what());
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  stats.generated = generated;
  stats.cached = cached;
  stats.failed = stats.errors.size();
  return stats;
}

}  // namespace latte
