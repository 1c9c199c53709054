#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kMini = std::string(MLRECALL_DATA_DIR) + "/fixtures/mini.jsonl";

fs::path scratch() {
  static const auto p = [] {
    auto d = fs::temp_directory_path() / ("mlrecall_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

// Runs the CLI with `args`, returning its exit status. Output goes to a log.
int run(const std::string& args) {
  const auto cmd = std::string(MLRECALL_CLI) + " " + args + " >>" + (scratch() / "log.txt").string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string out(const std::string& name) { return (scratch() / name).string(); }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

bool leftovers(const std::string& name) {
  for (const auto& e : fs::directory_iterator(scratch()))
    if (e.path().filename().string().find(name) != std::string::npos) return true;
  return false;
}

const std::string kBase = "--model toy:7 --data " + kMini;

} // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("analyze --help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("analyze --model toy:7 --out " + out("nodata")), 2);
  EXPECT_FALSE(leftovers("nodata"));
  EXPECT_EQ(run("analyze " + kBase + " --out " + out("badmetric") + " --metrics ranks,bogus"), 2);
  EXPECT_EQ(run("extract sideways " + kBase + " --out " + out("badkind") + " --layers 1"), 2);
  EXPECT_EQ(run("eval " + kBase + " --out " + out("novec") + " --conditions translation"), 2);
  EXPECT_FALSE(leftovers("badmetric"));
  EXPECT_FALSE(leftovers("novec"));
}

TEST(Cli, AnalyzeRerunsAreByteIdentical) {
  const std::string args = "analyze " + kBase + " --languages en,zh,fr --layers 1-3";
  ASSERT_EQ(run(args + " --out " + out("an1")), 0);
  ASSERT_EQ(run(args + " --jobs 3 --out " + out("an2")), 0);
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(out("an1"))) {
    if (e.path().extension() != ".csv") continue;
    ++n;
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(out("an2")) / e.path().filename())) << e.path().filename();
  }
  EXPECT_EQ(n, 6u);
}

TEST(Cli, ConfigFileWithCommandLineOverride) {
  const auto cfg = scratch() / "cfg.json";
  std::ofstream(cfg) << R"({"model": "toy:7", "data": ")" << kMini
                     << R"(", "languages": ["en", "ja"], "metrics": "ranks", "layers": "0-1"})";
  ASSERT_EQ(run("analyze --config " + cfg.string() + " --out " + out("cfg")), 0);
  ASSERT_EQ(run("analyze --config " + cfg.string() + " --languages en --out " + out("cfg_en")), 0);
  EXPECT_TRUE(fs::exists(fs::path(out("cfg")) / "ranks.csv"));
  EXPECT_FALSE(fs::exists(fs::path(out("cfg")) / "propagation.csv"));
  const auto all = slurp(fs::path(out("cfg")) / "ranks.csv"), en = slurp(fs::path(out("cfg_en")) / "ranks.csv");
  EXPECT_NE(all.find(",ja,"), std::string::npos);
  EXPECT_EQ(en.find(",ja,"), std::string::npos);
  const auto m = nlohmann::json::parse(slurp(fs::path(out("cfg_en")) / "manifest.json"));
  EXPECT_EQ(m["config"]["languages"], "en");
  EXPECT_EQ(m["config"]["layers"], "0-1");
}

TEST(Cli, VerifyDetectsTampering) {
  ASSERT_EQ(run("analyze " + kBase + " --languages en --metrics ranks --out " + out("ver")), 0);
  EXPECT_EQ(run("verify " + out("ver")), 0);
  std::ofstream(fs::path(out("ver")) / "ranks_mean.csv", std::ios::app) << "en,english,0,1\n";
  EXPECT_EQ(run("verify " + out("ver")), 1);
  EXPECT_EQ(run("verify " + out("does_not_exist")), 1);
}

TEST(Cli, ExtractGridEvaluateAndReport) {
  const std::string split = " --fractions 0.3,0.3,0.4 --languages en,fr,zh";
  ASSERT_EQ(run("extract translation " + kBase + split + " --layers 1-2 --scales 1,2 --grid --out " + out("tv")), 0);
  const auto grid = nlohmann::json::parse(slurp(fs::path(out("tv")) / "grid.json"));
  EXPECT_EQ(grid["candidates"].size(), 4u);
  ASSERT_TRUE(fs::exists(fs::path(out("tv")) / "vectors" / "translation_best.bin"));
  ASSERT_EQ(run("extract recall " + kBase + split + " --layers 2 --icl-k 2 --out " + out("rv")), 0);
  ASSERT_TRUE(fs::exists(fs::path(out("rv")) / "vectors" / "recall_L2.bin"));

  const auto ev = "eval " + kBase + split + " --conditions original,translation,recall,combined --seeds 0,1" +
                  " --translation-vector " + out("tv") + "/vectors/translation_best.bin" + " --recall-vector " +
                  out("rv") + "/vectors/recall_L2.bin";
  ASSERT_EQ(run(ev + " --out " + out("ev")), 0);
  const fs::path e(out("ev"));
  for (const char* f : {"summary.csv", "comparison_seed0.csv", "comparison_seed1.csv", "reports/seed1/combined.json"})
    EXPECT_TRUE(fs::exists(e / f)) << f;
  const auto combined = nlohmann::json::parse(slurp(e / "reports" / "seed0" / "combined.json"));
  EXPECT_EQ(combined["condition"], "combined");
  EXPECT_NE(combined["intervention_fingerprint"], "none");
  EXPECT_EQ(run("verify " + out("ev")), 0);

  ASSERT_EQ(run("report " + out("ev") + " --out " + out("rep")), 0);
  const auto rep = slurp(fs::path(out("rep")) / "report.csv");
  EXPECT_NE(rep.find("combined,non-en,2,"), std::string::npos);
  EXPECT_NE(rep.find("original,en,2,"), std::string::npos);
}

TEST(Cli, ForeignVectorIsRefusedUnlessForced) {
  ASSERT_EQ(run("extract recall " + kBase + " --fractions 0.3,0.3,0.4 --layers 1 --icl-k 2 --out " + out("v7")), 0);
  const auto vec = out("v7") + "/vectors/recall_L1.bin";
  const auto ev = "eval --model toy:8 --data " + kMini + " --languages fr --conditions recall --recall-vector " + vec;
  EXPECT_EQ(run(ev + " --out " + out("foreign")), 3);
  EXPECT_FALSE(leftovers("foreign"));
  EXPECT_EQ(run(ev + " --force --out " + out("forced")), 0);
  EXPECT_EQ(run("similarity --model toy:8 --data " + kMini + " --vector " + vec + " --out " + out("simforeign")), 3);
}

TEST(Cli, FailedRunLeavesNoArtifacts) {
  EXPECT_EQ(run("extract recall " + kBase + " --fractions 0,0.5,0.5 --layers 1 --out " + out("emptytrain")), 1);
  EXPECT_FALSE(leftovers("emptytrain"));
  EXPECT_EQ(run("analyze --model toy:7 --data " + out("missing.jsonl") + " --out " + out("nofile")), 1);
  EXPECT_FALSE(leftovers("nofile"));
}

TEST(Cli, CausalAndSimilarityCommands) {
  const std::string base = kBase + " --languages en,fr";
  ASSERT_EQ(run("patch " + base + " --layers 0-1 --max-examples 3 --out " + out("pa")), 0);
  EXPECT_NE(slurp(fs::path(out("pa")) / "aie.csv").find("example_id,layer,component,head,metric,value"),
            std::string::npos);
  ASSERT_EQ(run("knockout " + base + " --k 2 --sources subject,last --out " + out("ko")), 0);
  EXPECT_EQ(run("knockout " + base + " --sources nowhere --out " + out("ko_bad")), 2);
  ASSERT_EQ(run("ablate " + base + " --relations country_currency --mode mean --top-k 2 --out " + out("ab")), 0);
  const auto summary = nlohmann::json::parse(slurp(fs::path(out("ab")) / "ablation_summary.json"));
  EXPECT_GT(summary["relations"]["country_currency"]["n"].get<int>(), 0);
  ASSERT_EQ(run("similarity " + base + " --hidden --layers 1,3 --out " + out("si")), 0);
  const auto sim = nlohmann::json::parse(slurp(fs::path(out("si")) / "similarity.json"));
  EXPECT_EQ(sim["space"], "mlp_hidden");
  EXPECT_EQ(sim["per_layer_cos"].size(), 2u);
  for (const char* d : {"pa", "ko", "ab", "si"}) EXPECT_EQ(run(std::string("verify ") + out(d)), 0) << d;
}
