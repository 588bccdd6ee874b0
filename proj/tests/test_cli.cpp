#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "harness.hpp"
#include "longsim/cli.hpp"
#include "longsim/rollout.hpp"

using namespace longsim;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "longsim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Corpus, vocabulary and a one-epoch micro model, built once for the suite.
struct Workspace {
  fs::path root = fs::temp_directory_path() / "longsim_test_cli";

  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "micro.txt") << longsim::testing::micro_config(32).to_text();
    EXPECT_EQ(run({"synth", "--count", "3", "--seed", "7", "--out", path("corpus.jsonl")}), 0);
    EXPECT_EQ(run({"vocab", "--corpus", path("corpus.jsonl"), "--size", "32", "--k", "16", "--out", path("vocab.json")}), 0);
    EXPECT_EQ(run({"train", "--corpus", path("corpus.jsonl"), "--vocab", path("vocab.json"), "--out", path("run"),
                   "--model-config", path("micro.txt"), "--epochs", "1", "--batch-size", "3", "--jobs", "1"}),
              0);
  }
  std::string path(const std::string& name) const { return (root / name).string(); }
};

const Workspace& ws() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST(Cli, HelpListsEverySubcommand) {
  ::testing::internal::CaptureStdout();
  EXPECT_EQ(run({"--help"}), 0);
  const std::string out = ::testing::internal::GetCapturedStdout();
  for (const char* sub : {"synth", "vocab", "tokenize", "train", "rollout", "reference", "eval", "render"}) {
    EXPECT_NE(out.find(sub), std::string::npos) << sub;
  }
  EXPECT_NE(run({"bogus"}), 0);
}

TEST(Cli, SynthIsByteIdenticalOnRerun) {
  const auto& w = ws();
  ASSERT_EQ(run({"synth", "--count", "3", "--seed", "7", "--out", w.path("again.jsonl")}), 0);
  EXPECT_EQ(slurp(w.path("again.jsonl")), slurp(w.path("corpus.jsonl")));
  EXPECT_TRUE(fs::exists(w.path("corpus.jsonl.config.toml")));
}

TEST(Cli, TrainWritesItsArtifacts) {
  const auto& w = ws();
  for (const char* f : {"model.ckpt", "model_config.txt", "train_config.txt", "vocab.json", "loss.csv",
                        "accuracy.txt", "run_config.toml"}) {
    EXPECT_TRUE(fs::exists(fs::path(w.path("run")) / f)) << f;
  }
}

TEST(Cli, RolloutEvalRenderAreDeterministic) {
  const auto& w = ws();
  const std::string model = w.path("run/model.ckpt");
  for (const char* name : {"r1.json", "r2.json"}) {
    ASSERT_EQ(run({"rollout", "--model", model, "--scenario", w.path("corpus.jsonl"), "--horizon", "4", "--seed", "3",
                   "--out", w.path(name)}),
              0);
  }
  EXPECT_EQ(slurp(w.path("r1.json")), slurp(w.path("r2.json")));
  EXPECT_NO_THROW(load_rollout(w.path("r1.json")));

  for (const char* dir : {"all1", "all2"}) {
    ASSERT_EQ(run({"rollout", "--model", model, "--scenario", w.path("corpus.jsonl"), "--all", "--horizon", "16",
                   "--out", w.path(dir), "--jobs", dir[3] == '1' ? "1" : "3"}),
              0);
  }
  for (int i = 0; i < 3; ++i) {
    const std::string f = "rollout_000" + std::to_string(i) + ".json";
    EXPECT_EQ(slurp(fs::path(w.path("all1")) / f), slurp(fs::path(w.path("all2")) / f)) << f;
  }

  ASSERT_EQ(run({"reference", "--corpus", w.path("corpus.jsonl"), "--out", w.path("ref.json")}), 0);
  ASSERT_EQ(run({"eval", "--rollouts", w.path("all1"), "--reference", w.path("ref.json"), "--out", w.path("ev1")}), 0);
  ASSERT_EQ(run({"eval", "--rollouts", w.path("all2"), "--reference", w.path("ref.json"), "--out", w.path("ev2")}), 0);
  EXPECT_EQ(slurp(w.path("ev1/report.txt")), slurp(w.path("ev2/report.txt")));
  EXPECT_EQ(slurp(w.path("ev1/report.csv")), slurp(w.path("ev2/report.csv")));

  ASSERT_EQ(run({"render", "--rollout", w.path("r1.json"), "--step", "20", "--out", w.path("f1.svg")}), 0);
  ASSERT_EQ(run({"render", "--rollout", w.path("r2.json"), "--step", "20", "--out", w.path("f2.svg")}), 0);
  const std::string svg = slurp(w.path("f1.svg"));
  EXPECT_EQ(svg, slurp(w.path("f2.svg")));
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("agent ego"), std::string::npos);
  EXPECT_NE(run({"render", "--rollout", w.path("r1.json"), "--step", "9999", "--out", w.path("f3.svg")}), 0);
}

TEST(Cli, RunConfigReproducesTheRun) {
  const auto& w = ws();
  ASSERT_EQ(run({"synth", "--count", "2", "--seed", "7", "--out", w.path("base.jsonl")}), 0);
  ASSERT_EQ(run({"--run-config", w.path("base.jsonl.config.toml"), "synth", "--out", w.path("rerun.jsonl")}), 0);
  EXPECT_EQ(slurp(w.path("base.jsonl")), slurp(w.path("rerun.jsonl")));
}

TEST(Cli, HashMismatchExitsWithThree) {
  const auto& w = ws();
  ASSERT_EQ(run({"vocab", "--corpus", w.path("corpus.jsonl"), "--size", "32", "--k", "16", "--seed", "99", "--out",
                 w.path("other_vocab.json")}),
            0);
  EXPECT_EQ(run({"rollout", "--model", w.path("run/model.ckpt"), "--vocab", w.path("other_vocab.json"), "--scenario",
                 w.path("corpus.jsonl"), "--horizon", "2", "--out", w.path("never.json")}),
            3);
  EXPECT_FALSE(fs::exists(w.path("never.json")));
}

TEST(Cli, JobsEnvironmentOverride) {
  ::setenv("LONGSIM_JOBS", "5", 1);
  EXPECT_EQ(effective_jobs(2), 5);
  ::setenv("LONGSIM_JOBS", "zero", 1);
  EXPECT_THROW(effective_jobs(2), std::invalid_argument);
  ::unsetenv("LONGSIM_JOBS");
  EXPECT_EQ(effective_jobs(2), 2);
  EXPECT_EQ(effective_jobs(0), 1);
}
