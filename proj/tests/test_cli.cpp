#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"
#include "test_support.hpp"
#include "valler/codec.hpp"
#include "valler/corpus.hpp"

namespace {

using valler::testing::TempDir;
namespace cli = valler::cli;

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "valler");
  std::ostringstream out;
  std::ostringstream err;
  CliRun r;
  r.code = cli::cmd_dispatch(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Keeps VALLER_SEED out of tests that do not set it themselves.
class CliTest : public ::testing::Test {
 protected:
  void SetUp() override { unsetenv("VALLER_SEED"); }
  void TearDown() override { unsetenv("VALLER_SEED"); }
  TempDir dir{"cli"};
  std::string out() const { return dir.path().string(); }
};

TEST_F(CliTest, MissingCommandIsUsageError) { EXPECT_EQ(run({}).code, cli::kExitUsage); }

TEST_F(CliTest, UnknownCommandSuggests) {
  const auto r = run({"bench-step"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("bench-steps"), std::string::npos) << r.err;
}

TEST_F(CliTest, UnknownFlagSuggests) {
  const auto r = run({"bench-steps", "--durration", "10", "--out", out()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("--duration"), std::string::npos) << r.err;
}

TEST_F(CliTest, SuggestRejectsDistantWords) {
  EXPECT_EQ(cli::suggest("synht", {"synth", "prosody"}), "synth");
  EXPECT_EQ(cli::suggest("completely-unrelated", {"synth", "prosody"}), "");
}

TEST_F(CliTest, BenchStepsTable) {
  const auto r = run({"bench-steps", "--duration", "10", "--hz", "75", "--out", out()});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  std::map<std::string, std::string> rows;
  while (std::getline(lines, line)) {
    const auto last = line.find_last_of(' ');
    if (last == std::string::npos) continue;
    rows[line.substr(0, 16)] = line.substr(last + 1);
  }
  EXPECT_EQ(rows["VALL-E          "], "750");
  EXPECT_EQ(rows["VALL-E R (m=2)  "], "375");
  EXPECT_EQ(rows["AudioLM         "], "6000");
  EXPECT_TRUE(std::filesystem::exists(dir / "bench_steps.json"));
}

TEST_F(CliTest, CheckPathAllTrue) {
  std::ofstream(dir / "path.json") << "[0,0,1,2]";
  const auto r = run({"check-path", (dir / "path.json").string(), "--length", "3", "--out", out()});
  EXPECT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("locality: true"), std::string::npos);
  EXPECT_NE(r.out.find("monotonicity: true"), std::string::npos);
  EXPECT_NE(r.out.find("completeness: true"), std::string::npos);
}

TEST_F(CliTest, CheckPathReportsViolations) {
  std::ofstream(dir / "path.txt") << "0 2 2";
  const auto r = run({"check-path", (dir / "path.txt").string(), "--length", "3", "--out", out()});
  EXPECT_EQ(r.code, cli::kExitOk);
  EXPECT_NE(r.out.find("locality: false"), std::string::npos);
  EXPECT_NE(r.out.find("completeness: false"), std::string::npos);
}

TEST_F(CliTest, SynthWithMissingWeightsNamesPath) {
  const auto missing = (dir / "nowhere-ar.vrlm").string();
  const auto r = run({"synth", "--ar", missing, "--nar", missing, "--codebooks", missing,
                      "--phonemes", "1,2", "--seed", "3", "--out", out()});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_NE(r.err.find("nowhere-ar.vrlm"), std::string::npos) << r.err;
}

TEST_F(CliTest, SeedIsRequiredForGeneration) {
  const auto r = run({"gen-corpus", "--count", "2", "--out", out()});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("VALLER_SEED"), std::string::npos);
}

TEST_F(CliTest, SeedFallsBackToEnvironment) {
  setenv("VALLER_SEED", "41", 1);
  ASSERT_EQ(run({"gen-corpus", "--count", "2", "--out", out()}).code, cli::kExitOk);
  auto cfg = nlohmann::json::parse(slurp(dir / "gen-corpus.config.json"));
  EXPECT_EQ(cfg["config"]["seed"], 41);

  // The flag wins over the environment.
  ASSERT_EQ(run({"gen-corpus", "--count", "2", "--seed", "5", "--out", out()}).code, cli::kExitOk);
  cfg = nlohmann::json::parse(slurp(dir / "gen-corpus.config.json"));
  EXPECT_EQ(cfg["config"]["seed"], 5);

  setenv("VALLER_SEED", "not-a-number", 1);
  EXPECT_EQ(run({"gen-corpus", "--count", "2", "--out", out()}).code, cli::kExitUsage);
}

TEST_F(CliTest, FlagsOverrideConfigFileOverDefaults) {
  std::ofstream(dir / "run.json") << R"({"count": 3, "vocab": 7, "dim": 5})";
  const auto r = run({"gen-corpus", "--config", (dir / "run.json").string(), "--count", "2",
                      "--seed", "1", "--out", out()});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const auto c = valler::corpus::read_corpus(dir / "corpus.jsonl");
  EXPECT_EQ(c.utterances.size(), 2u);
  EXPECT_EQ(c.vocab, 7);
  EXPECT_EQ(c.dim, 5);

  const auto cfg = nlohmann::json::parse(slurp(dir / "gen-corpus.config.json"));
  EXPECT_EQ(cfg["version"], 1);
  EXPECT_TRUE(cfg.contains("config_hash"));
  EXPECT_EQ(cfg["config"]["count"], "2");
  EXPECT_EQ(cfg["config"]["max-phonemes"], "12");  // default is echoed too
  EXPECT_NE(r.err.find("gen-corpus config"), std::string::npos);
}

TEST_F(CliTest, RuntimeErrorsExitOne) {
  const auto r = run({"train-codec", "--corpus", (dir / "none.jsonl").string(), "--seed", "1",
                      "--out", out()});
  EXPECT_EQ(r.code, cli::kExitRuntime);
}

TEST_F(CliTest, EndToEndPipeline) {
  const auto o = out();
  auto must = [](const CliRun& r) { ASSERT_EQ(r.code, cli::kExitOk) << r.out << r.err; };
  must(run({"gen-corpus", "--count", "24", "--vocab", "8", "--dim", "4", "--max-phonemes", "5",
            "--max-duration", "6", "--seed", "1", "--out", o}));
  must(run({"train-codec", "--corpus", o + "/corpus.jsonl", "--merge", "2,1,1,1,1,1,1,1",
            "--entries", "8", "--epochs", "2", "--seed", "2", "--out", o}));
  for (const char* kind : {"train-ar", "train-nar"}) {
    must(run({kind, "--corpus", o + "/corpus.jsonl", "--codebooks", o + "/codebooks.mrvq",
              "--layers", "1", "--dim", "16", "--heads", "2", "--ffn", "32", "--steps", "10",
              "--warmup", "2", "--batch", "4", "--seed", "3", "--out", o}));
  }
  must(run({"synth", "--ar", o + "/ar.vrlm", "--nar", o + "/nar.vrlm", "--codebooks",
            o + "/codebooks.mrvq", "--corpus", o + "/corpus.jsonl", "--target-utt", "1",
            "--prompt-utt", "0", "--seed", "4", "--out", o}));
  EXPECT_TRUE(std::filesystem::exists(dir / "synth_audit.jsonl"));
  must(run({"prosody", "--ar", o + "/ar.vrlm", "--nar", o + "/nar.vrlm", "--codebooks",
            o + "/codebooks.mrvq", "--corpus", o + "/corpus.jsonl", "--preset", "2", "--seed", "5",
            "--out", o}));
  const auto codes = valler::codec::load_codes(dir / "prosody.codes");
  const auto c = valler::corpus::read_corpus(dir / "corpus.jsonl");
  EXPECT_EQ(codes.length(), c.materialize(2).alignment.total_frames());
  must(run({"dump-attn", "--ar", o + "/ar.vrlm", "--phonemes", "1,2,3", "--svg", "--seed", "6",
            "--out", o}));
  EXPECT_TRUE(std::filesystem::exists(dir / "attention.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "attention.svg"));
}

}  // namespace
