#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "atmodist/pipeline.hpp"
#include "test_support.hpp"

using namespace atmodist;
using atmodist::testing::TempDir;

namespace {

PipelineConfig tiny_config(const fs::path& run_dir) {
  auto c = load_pipeline_config(fs::path(ATMODIST_CONFIG_DIR) / "tiny.json");
  c.run_dir = run_dir;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Command {
  int status = -1;
  std::string output;
};

Command run_cli(const std::string& args) {
  Command c;
  const std::string cmd = std::string(ATMODIST_CLI) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return c;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) c.output += buf;
  const int raw = ::pclose(pipe);
  c.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return c;
}

}  // namespace

TEST(SplitTimes, DisjointRanges) {
  const auto [train, eval] = split_times(100, SplitConfig{});
  EXPECT_EQ(train.begin, 0);
  EXPECT_EQ(train.end, 70);
  EXPECT_EQ(eval.begin, 75);
  EXPECT_EQ(eval.end, 100);
  EXPECT_THROW(split_times(100, SplitConfig{0.8, 0.3}), ConfigError);
  EXPECT_THROW(split_times(3, SplitConfig{}), ConfigError);
}

TEST(DeriveSeed, DistinctPerSaltAndStable) {
  EXPECT_EQ(derive_seed(1, 0), derive_seed(1, 0));
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
}

TEST(PipelineConfig, ValidationCatchesInconsistentSections) {
  auto c = tiny_config("unused");
  EXPECT_NO_THROW(validate(c));
  c.repnet.num_classes = 5;
  EXPECT_THROW(validate(c), ConfigError);
  c = tiny_config("unused");
  c.repnet.input_size = 32;
  EXPECT_THROW(validate(c), ConfigError);
  c = tiny_config("unused");
  c.sr.scale = 2;
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_THROW(load_pipeline_config("/nonexistent/config.json"), ConfigError);
}

TEST(PipelineConfig, ExplicitSeedsOverrideDerivedOnes) {
  auto j = nlohmann::json::parse(slurp(fs::path(ATMODIST_CONFIG_DIR) / "tiny.json"));
  const auto derived = pipeline_config_from_json(j);
  EXPECT_EQ(derived.train.seed, derive_seed(derived.seed, 2));
  j["train"]["seed"] = 99;
  EXPECT_EQ(pipeline_config_from_json(j).train.seed, 99u);
}

TEST(Stages, MissingCheckpointNamesTheFile) {
  TempDir dir("ckpt");
  try {
    stage_profile(dir / "nope", dir / "pairs.f32", dir / "out");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find((dir / "nope" / "model.json").string()), std::string::npos) << e.what();
  }
}

TEST(Pipeline, TinyRunIsDeterministic) {
  TempDir a("run_a"), b("run_b");
  const auto ra = run_pipeline(tiny_config(a.path()));
  const auto rb = run_pipeline(tiny_config(b.path()));
  EXPECT_EQ(ra.train_log, rb.train_log);
  EXPECT_EQ(ra.sr_rep, rb.sr_rep);
  const auto sa = slurp(a / "report/summary.json");
  EXPECT_FALSE(sa.empty());
  EXPECT_EQ(sa, slurp(b / "report/summary.json"));
  EXPECT_EQ(slurp(a / "ckpt/model.bin"), slurp(b / "ckpt/model.bin"));
  for (const auto& stage : stage_names()) EXPECT_TRUE(fs::exists(RunLayout{a.path()}.stage_marker(stage))) << stage;
}

TEST(Pipeline, ResumeSkipsFinishedStages) {
  TempDir dir("resume");
  auto cfg = tiny_config(dir.path());
  run_pipeline(cfg);
  const auto summary = slurp(dir / "report/summary.json");
  const auto weights = fs::last_write_time(dir / "ckpt/model.bin");
  fs::remove(RunLayout{dir.path()}.stage_marker("eval"));
  fs::remove_all(dir / "report");

  cfg.resume = true;
  std::vector<std::string> messages;
  run_pipeline(cfg, [&](const std::string& m) { messages.push_back(m); });
  EXPECT_EQ(slurp(dir / "report/summary.json"), summary);
  EXPECT_EQ(fs::last_write_time(dir / "ckpt/model.bin"), weights);
  EXPECT_NE(std::find(messages.begin(), messages.end(), "[train-pretext] skipped (already complete)"), messages.end());
  EXPECT_NE(std::find(messages.begin(), messages.end(), "[eval] start"), messages.end());
}

TEST(Pipeline, FailingStageIsReportedByName) {
  TempDir dir("fail");
  auto cfg = tiny_config(dir.path());
  cfg.input_series = (dir / "absent.f32").string();
  try {
    run_pipeline(cfg);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "gen-data");
  }
}

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run_cli("--help").status, 0);
  EXPECT_NE(run_cli("").status, 0);
  EXPECT_NE(run_cli("profile --metric l1 --ckpt x --out y").status, 0);
}

TEST(Cli, MissingCheckpointExitsWithProfileCode) {
  TempDir dir("cli");
  const auto r = run_cli("profile --ckpt " + (dir / "missing").string() + " --out " + (dir / "p.csv").string() +
                         " --pairs " + (dir / "pairs.f32").string());
  EXPECT_EQ(r.status, 14) << r.output;
  EXPECT_NE(r.output.find((dir / "missing" / "model.json").string()), std::string::npos) << r.output;
}

TEST(Cli, GenDataThenFitTransform) {
  TempDir dir("cli_gen");
  auto r = run_cli("gen-data --size 32x48 --times 12 --seed 4 --out " + dir.path().string());
  ASSERT_EQ(r.status, 0) << r.output;
  const auto s = load_series(dir / "series.f32");
  EXPECT_EQ(s.n_lat, 32);
  EXPECT_EQ(s.n_lon, 48);
  EXPECT_EQ(s.n_times, 12);
  r = run_cli("fit-transform --alpha 0.3 --data " + dir.path().string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_DOUBLE_EQ(transform_from_json(read_json(dir / "transform.json")).alpha, 0.3);
  EXPECT_EQ(run_cli("fit-transform --data " + (dir / "nothing").string()).status, 11);
}
