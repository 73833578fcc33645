#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(LITEVLM_CLI) + " " + args + " 2>/dev/null";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("litevlm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "cfg.json") << R"({
      "vit": {"model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32}},
      "llm": {"d_model": 32, "n_heads": 2, "n_layers": 1, "d_ff": 64},
      "max_new": 4,
      "variants": {"fastv": {"keep_ratio": 0.7}, "litevlm": {"keep_ratio": 0.8, "threshold": 0.5}}})";
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string wd() const { return "--workdir " + dir.string(); }
  fs::path dir;
};

}  // namespace

TEST(CliHelp, EverySubcommandDocumentsEveryFlag) {
  const std::map<std::string, std::set<std::string>> flags{
      {"synth", {"--scenes", "--queries", "--seed", "--val-fraction", "--include-images", "--out"}},
      {"train-patchsel", {"--config", "--train", "--val", "--steps", "--batch", "--lr", "--threshold", "--seed", "--out",
                          "--metrics"}},
      {"train-toksel", {"--config", "--corpus", "--samples", "--steps", "--lr", "--alpha", "--train-layer", "--seed",
                        "--out", "--metrics"}},
      {"distill-draft", {"--config", "--train", "--val", "--target-steps", "--target-out", "--examples", "--steps",
                         "--batch", "--lr", "--lambda", "--draft-len", "--max-new", "--eval-prompts", "--seed", "--out",
                         "--metrics"}},
      {"bench", {"--config", "--corpus", "--scenes", "--queries", "--variants", "--limit", "--out", "--format",
                 "--include-wall", "--prune-audit", "--calibration", "--seed", "--keep-ratio", "--threshold",
                 "--draft-len", "--max-new", "--precision", "--granularity", "--token-scores", "--forced-keep"}},
      {"report", {"--in", "--calibration", "--out", "--format"}},
      {"verify", {"--calibration", "--prompts", "--seed"}},
  };
  const std::regex flag_line(R"(^\s+(--[a-z][a-z0-9-]*)\S*\s+(.*)$)");
  for (const auto& [sub, expected] : flags) {
    const CliRun r = run(sub + " --help");
    ASSERT_EQ(r.code, 0) << sub;
    std::set<std::string> documented;
    std::istringstream lines(r.out);
    for (std::string line; std::getline(lines, line);) {
      std::smatch m;
      if (!std::regex_match(line, m, flag_line)) continue;
      documented.insert(m[1]);
      // Text after the flag and its type hint: a description must be present.
      EXPECT_NE(m[2].str().find_first_not_of(" "), std::string::npos) << sub << ": " << line;
    }
    for (const auto& f : expected) EXPECT_TRUE(documented.count(f)) << sub << " lacks " << f << "\n" << r.out;
    for (const auto& f : documented) {
      if (f != "--help" && f != "--workdir" && f != "--threads") {
        EXPECT_TRUE(expected.count(f)) << sub << " has unexpected flag " << f;
      }
    }
  }
  const CliRun top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* f : {"--workdir", "--threads"}) EXPECT_NE(top.out.find(f), std::string::npos);
}

TEST(CliErrors, ExitCodes) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("bench --bogus-flag 3").code, 1);
  EXPECT_EQ(run("synth --scenes abc").code, 1);
  EXPECT_EQ(run("bench --config /nonexistent/cfg.json").code, 2);
  EXPECT_EQ(run("report --in /nonexistent/report.json").code, 2);
  EXPECT_EQ(run("bench --variants baseline,eagle --limit 1").code, 2);
  EXPECT_EQ(run("bench --precision int4 --limit 1").code, 2);
}

TEST_F(CliTest, SynthWritesTwoReproducibleCorpora) {
  ASSERT_EQ(run(wd() + " synth --scenes 20 --queries 3 --seed 7 --out data/").code, 0);
  ASSERT_TRUE(fs::exists(dir / "data/train.lvcs"));
  ASSERT_TRUE(fs::exists(dir / "data/val.lvcs"));
  const std::string first = slurp(dir / "data/train.lvcs") + slurp(dir / "data/val.lvcs");
  ASSERT_EQ(run(wd() + " --threads 2 synth --scenes 20 --queries 3 --seed 7 --out again").code, 0);
  EXPECT_EQ(slurp(dir / "again/train.lvcs") + slurp(dir / "again/val.lvcs"), first);
  ASSERT_EQ(run(wd() + " synth --scenes 20 --queries 3 --seed 8 --out other").code, 0);
  EXPECT_NE(slurp(dir / "other/train.lvcs"), slurp(dir / "data/train.lvcs"));
}

TEST_F(CliTest, BenchThreeRowsDeterministicAndFlagsOverrideConfig) {
  ASSERT_EQ(run(wd() + " bench --config cfg.json --variants baseline,fastv,litevlm --limit 2 --out report.json").code, 0);
  const std::string a = slurp(dir / "report.json");
  const auto j = nlohmann::json::parse(a);
  ASSERT_EQ(j["rows"].size(), 3u);
  EXPECT_EQ(j["rows"][0]["label"], "baseline");
  EXPECT_EQ(j["rows"][1]["label"], "fastv_r0.7");
  EXPECT_EQ(j["rows"][2]["label"], "litevlm_r0.8_t0.5");

  ASSERT_EQ(run(wd() + " --threads 2 bench --config cfg.json --variants baseline,fastv,litevlm --limit 2 --out again.json")
                .code,
            0);
  EXPECT_EQ(slurp(dir / "again.json"), a);

  ASSERT_EQ(run(wd() + " bench --config cfg.json --variants fastv,litevlm:fp8 --keep-ratio 0.3 --limit 1 --out o.json").code, 0);
  const auto o = nlohmann::json::parse(slurp(dir / "o.json"));
  EXPECT_EQ(o["rows"][0]["label"], "fastv_r0.3");
  EXPECT_EQ(o["rows"][1]["label"], "litevlm_r0.3_t0.5_fp8");
}

TEST_F(CliTest, ReportConvertsBetweenFormats) {
  ASSERT_EQ(run(wd() + " report --out table.json").code, 0);
  ASSERT_EQ(run(wd() + " report --in table.json --out table.csv").code, 0);
  const CliRun back = run(wd() + " report --in table.csv --format json");
  ASSERT_EQ(back.code, 0);
  EXPECT_EQ(nlohmann::json::parse(back.out), nlohmann::json::parse(slurp(dir / "table.json")));
  const CliRun md = run(wd() + " report --in table.json --format markdown");
  EXPECT_NE(md.out.find("| litevlm_fp8 |"), std::string::npos) << md.out;
  EXPECT_EQ(run(wd() + " report --in table.json --format xml").code, 2);
}

TEST_F(CliTest, TrainingCommandsWriteParameterFiles) {
  ASSERT_EQ(run(wd() + " synth --scenes 6 --queries 2 --seed 3 --out data").code, 0);
  const CliRun ps = run(wd() + " train-patchsel --train data/train.lvcs --val data/val.lvcs --steps 5 --batch 2 --out p/ps.lvlm");
  EXPECT_EQ(ps.code, 0);
  EXPECT_NE(ps.out.find("macro-F1"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "p/ps.lvlm"));
  const CliRun dd = run(wd() +
                     " distill-draft --config cfg.json --train data/train.lvcs --val data/val.lvcs --target-steps 3"
                     " --target-out p/llm.lvlm --examples 4 --steps 3 --eval-prompts 2 --out p/draft.lvlm");
  EXPECT_EQ(dd.code, 0);
  EXPECT_NE(dd.out.find("mean accepted"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "p/draft.lvlm"));
  EXPECT_TRUE(fs::exists(dir / "p/llm.lvlm"));
  const CliRun ts = run(wd() + " train-toksel --config cfg.json --corpus data/train.lvcs --samples 1 --steps 3 --out p/toksel.lvlm");
  EXPECT_EQ(ts.code, 0);
  EXPECT_TRUE(fs::exists(dir / "p/toksel.lvlm"));

  std::ofstream(dir / "trained.json") << R"({
      "vit": {"model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32}},
      "llm": {"d_model": 32, "n_heads": 2, "n_layers": 1, "d_ff": 64},
      "max_new": 4, "token_scores": "trained",
      "params": {"llm": "p/llm.lvlm", "patchsel": "p/ps.lvlm", "toksel": "p/toksel.lvlm", "draft": "p/draft.lvlm"}})";
  EXPECT_EQ(run(wd() + " bench --config trained.json --variants litevlm --corpus data/val.lvcs --limit 1").code, 0);
  std::ofstream(dir / "broken.json") << R"({"params": {"draft": "p/missing.lvlm"}})";
  EXPECT_EQ(run(wd() + " bench --config broken.json --variants litevlm --limit 1").code, 2);
}

TEST(CliVerify, AllChecksPass) {
  const CliRun r = run("verify --prompts 20");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("[FAIL]"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("[PASS] losslessness"), std::string::npos);
  EXPECT_NE(r.out.find("[PASS] input tokens"), std::string::npos);
  EXPECT_NE(r.out.find("[PASS] modeled speedup"), std::string::npos);
}
