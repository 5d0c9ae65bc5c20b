#include <gtest/gtest.h>

#include <sstream>

#include "latte/commands.hpp"
#include "support/oracles.hpp"

using namespace latte;

namespace {

/// make-toy, describe, train, eval into `root`, with a short schedule.
void run_chain(const fs::path& root, std::size_t workers = 3) {
  std::ostringstream log;
  const RunDir run{root};
  ToyConfig toy;
  toy.train_per_class = 10;
  cmd_make_toy({toy, run.dataset()}, log);
  auto cfg = read_json(run.dataset() / "train_config.json");
  cfg["max_iterations"] = 12;
  write_json(run.dataset() / "train_config.json", cfg);

  DescribeCliOptions d;
  d.dataset = run.dataset();
  d.cache = run.captions();
  d.zs_labels = run.zs_labels();
  d.snapshot = run.describe_config();
  d.workers = workers;
  d.retry = {1, std::chrono::milliseconds(0)};
  cmd_describe(d, log);

  TrainCliOptions t;
  t.dataset = run.dataset();
  t.run = run;
  cmd_train(t, log);
  cmd_eval({run.checkpoint(), run.dataset(), Split::kTest, run.eval_report(Split::kTest)}, log);
}

}  // namespace

TEST(Cli, ChainProducesEveryArtifact) {
  oracle::TempDir dir("chain");
  run_chain(dir.path);
  const RunDir run{dir.path};
  for (const auto& p : {run.config(), run.describe_config(), run.zs_labels(), run.captions(),
                        run.checkpoint() / "encoder.json", run.checkpoint() / "prototypes.json",
                        run.checkpoint() / "metrics.jsonl", run.eval_report(Split::kTest)})
    EXPECT_TRUE(fs::exists(p)) << p;
  const auto report = read_json(run.eval_report(Split::kTest));
  EXPECT_EQ(report["mode"], "latteclip");
  EXPECT_EQ(report["n"], 100);
  EXPECT_FALSE(fs::exists(run.lock()));
}

TEST(Cli, IdenticalRunsHashIdentically) {
  oracle::TempDir a("hash_a"), b("hash_b");
  run_chain(a.path, 1);
  run_chain(b.path, 5);
  EXPECT_EQ(canonical_run_hash(a.path), canonical_run_hash(b.path));
}

TEST(Cli, TrainWithoutCaptionsNamesDescribe) {
  oracle::TempDir dir("nocap");
  std::ostringstream log;
  const RunDir run{dir.path};
  cmd_make_toy({ToyConfig{}, run.dataset()}, log);
  TrainCliOptions t;
  t.dataset = run.dataset();
  t.run = run;
  try {
    cmd_train(t, log);
    FAIL();
  } catch (const MissingArtifact& e) {
    EXPECT_NE(std::string(e.what()).find("describe"), std::string::npos) << e.what();
  }
}

TEST(Cli, RerunTrainIsANoOpResume) {
  oracle::TempDir dir("rerun");
  run_chain(dir.path);
  const RunDir run{dir.path};
  const std::string before = canonical_run_hash(dir.path);
  std::ostringstream log;
  TrainCliOptions t;
  t.dataset = run.dataset();
  t.run = run;
  const TrainOutcome o = cmd_train(t, log);
  EXPECT_TRUE(o.resumed);
  EXPECT_EQ(o.steps_done, 12);
  EXPECT_EQ(canonical_run_hash(dir.path), before);
}

TEST(Cli, ConflictingConfigRejected) {
  oracle::TempDir dir("conflict");
  run_chain(dir.path);
  const RunDir run{dir.path};
  auto cfg = read_json(run.dataset() / "train_config.json");
  cfg["alpha"] = 0.9;
  write_json(dir.path / "other.json", cfg);
  std::ostringstream log;
  TrainCliOptions t;
  t.dataset = run.dataset();
  t.run = run;
  t.config = dir.path / "other.json";
  EXPECT_THROW(cmd_train(t, log), ConfigError);
}

TEST(Cli, ResolveConfigPrecedence) {
  oracle::TempDir dir("resolve");
  TrainCliOptions t;
  t.dataset = dir.path;
  EXPECT_EQ(resolve_train_config(t).batch_size, 512u);
  write_json(dir.path / "train_config.json", {{"batch_size", 7}});
  EXPECT_EQ(resolve_train_config(t).batch_size, 7u);
  write_json(dir.path / "x.json", {{"batch_size", 9}});
  t.config = dir.path / "x.json";
  t.seed = 42;
  const TrainConfig c = resolve_train_config(t);
  EXPECT_EQ(c.batch_size, 9u);
  EXPECT_EQ(c.seed, 42u);
  t.config = dir.path / "nope.json";
  EXPECT_THROW(resolve_train_config(t), ConfigError);
}

TEST(Cli, PseudoLabelTableIsReusedUnlessForced) {
  oracle::TempDir dir("pl");
  std::ostringstream log;
  const RunDir run{dir.path};
  cmd_make_toy({ToyConfig{}, run.dataset()}, log);
  const LabelTable a = ensure_zs_labels({run.dataset(), {}, run.zs_labels(), false}, log);
  const auto bytes = oracle::file_bytes(run.zs_labels());
  EXPECT_EQ(ensure_zs_labels({run.dataset(), {}, run.zs_labels(), false}, log), a);
  EXPECT_NE(log.str().find("already present"), std::string::npos);
  EXPECT_EQ(ensure_zs_labels({run.dataset(), {}, run.zs_labels(), true}, log), a);
  EXPECT_EQ(oracle::file_bytes(run.zs_labels()), bytes);
}

TEST(Cli, RunLockIsExclusive) {
  oracle::TempDir dir("lock");
  const RunDir run{dir.path};
  {
    RunLock held(run);
    EXPECT_TRUE(fs::exists(run.lock()));
    EXPECT_THROW(RunLock second(run), Error);
  }
  EXPECT_FALSE(fs::exists(run.lock()));
  RunLock again(run);
}

TEST(Cli, CanonicalHashIgnoresVolatileFields) {
  oracle::TempDir a("canon_a"), b("canon_b");
  write_json(a.path / "x.json", {{"v", 1}, {"created_at", "2024-01-01"}, {"nested", {{"wall_ms", 3.0}}}});
  write_json(b.path / "x.json", {{"v", 1}, {"created_at", "2031-05-05"}, {"nested", {{"wall_ms", 9.0}}}});
  std::ofstream(a.path / "m.jsonl") << R"({"step":0,"wall_ms":1.5})" << '\n';
  std::ofstream(b.path / "m.jsonl") << R"({"step":0,"wall_ms":7.0})" << '\n';
  std::ofstream(b.path / ".lock") << "123\n";
  EXPECT_EQ(canonical_run_hash(a.path), canonical_run_hash(b.path));
  write_json(b.path / "x.json", {{"v", 2}});
  EXPECT_NE(canonical_run_hash(a.path), canonical_run_hash(b.path));
}

TEST(Cli, ParseKindsAndProviders) {
  EXPECT_EQ(parse_kinds("class,group"), (PerKind<bool>{true, false, true}));
  EXPECT_THROW(parse_kinds(""), ConfigError);
  EXPECT_THROW(parse_kinds("class,video"), ConfigError);
  EXPECT_THROW(make_provider("gpt", Dataset{}, 0), BackendUnavailable);
}
