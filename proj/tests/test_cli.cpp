#include "cachesteer/cli.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace cachesteer;
using testing_support::kFixtures;
using testing_support::kSourceDir;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args, const std::filesystem::path& fixtures = kFixtures) {
  args.insert(args.begin(), "cachesteer");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err, fixtures);
  return {code, out.str(), err.str()};
}

std::string golden(const std::string& name) {
  std::ifstream in(kSourceDir / "tests" / "golden" / name);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string scene(const char* name) { return (kFixtures / "scenes" / (std::string(name) + ".img")).string(); }

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST(Cli, CaptionMatchesGoldenOutput) {
  for (const char* s : {"cat", "dog", "zebra"}) {
    const auto r = invoke({"caption", scene(s)});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, golden(std::string("caption_") + s + ".txt")) << s;
  }
}

TEST(Cli, CaptionOfMissingImageIsInputError) {
  const auto r = invoke({"caption", "/nonexistent/x.img"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("x.img"), std::string::npos);
}

TEST(Cli, PromptAndConfigAreRecordedInTheOutput) {
  const auto dir = testing_support::temp_dir("cli_out");
  const auto r = invoke({"caption", scene("cat"), "--prompt", "Image of text that says", "--beams", "2", "--out",
                      (dir / "o.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = read_json(dir / "o.json");
  EXPECT_EQ(j["config"]["decode"]["prompt"], "Image of text that says");
  EXPECT_EQ(j["config"]["decode"]["beams"], 2);
  EXPECT_EQ(j["workflow"], "caption");
  EXPECT_EQ(j["caption"].get<std::string>() + "\n", r.out);
  EXPECT_FALSE(j["beams"].empty());
  std::filesystem::remove_all(dir);
}

TEST(Cli, ArithmeticMatchesGoldenOutput) {
  const auto r = invoke({"arith", "img(vr/images/cuba_land.img) - img(vr/images/cuba_hall.img) + img(vr/images/peru_hall.img)",
                      "--asset-root", kFixtures.string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, golden("arith_peru.txt"));
}

TEST(Cli, ArithmeticErrors) {
  const auto degenerate = invoke({"arith", "txt(\"night\") - txt(\"night\")"});
  EXPECT_EQ(degenerate.code, 3);
  EXPECT_NE(degenerate.err.find("degenerate"), std::string::npos);
  const auto syntax = invoke({"arith", "img(a.png) -"});
  EXPECT_EQ(syntax.code, 2);
  EXPECT_NE(syntax.err.find("offset 11"), std::string::npos);
}

TEST(Cli, ArithmeticOutputRecordsTheTargetNorm) {
  const auto dir = testing_support::temp_dir("cli_arith");
  const auto r = invoke({"arith", "txt(\"a dog\")", "--out", (dir / "a.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = read_json(dir / "a.json");
  EXPECT_NEAR(j["target_norm"].get<double>(), 1.0, 1e-6);
  EXPECT_EQ(j["config"]["decode"]["f_e"], 1.06);
  std::filesystem::remove_all(dir);
}

TEST(Cli, BenchOnAnEmptyManifest) {
  const auto dir = testing_support::temp_dir("cli_bench");
  std::ofstream(dir / "m.json") << "[]";
  const auto r = invoke({"bench", (dir / "m.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["instances"].empty());
  EXPECT_EQ(j["failures"], 0);
  std::filesystem::remove_all(dir);
}

TEST(Cli, BenchWritesJsonAndCsv) {
  const auto dir = testing_support::temp_dir("cli_bench_out");
  const auto r = invoke({"bench", (kFixtures / "vr" / "manifest.json").string(), "--jobs", "2", "--out",
                      (dir / "r.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("R@5 1.000"), std::string::npos) << r.out;
  EXPECT_EQ(read_json(dir / "r.json")["instances"].size(), 10u);
  EXPECT_TRUE(std::filesystem::exists(dir / "r.csv"));
  std::filesystem::remove_all(dir);
}

TEST(Cli, BenchWithMissingManifestIsInputError) {
  EXPECT_EQ(invoke({"bench", "/nonexistent/manifest.json"}).code, 2);
}

TEST(Cli, SelftestPasses) {
  const auto r = invoke({"selftest"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  for (const char* row : {"gradient", "tokenizer", "steering"}) {
    EXPECT_NE(r.out.find(row), std::string::npos);
  }
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, SelftestRejectsZeroEpsilon) {
  EXPECT_EQ(invoke({"selftest", "--epsilon", "0"}).code, 2);
}

TEST(Cli, MissingFixturesAreInputErrors) {
  EXPECT_EQ(invoke({"selftest"}, "/nonexistent/fixtures").code, 2);
  EXPECT_EQ(invoke({"caption", scene("cat"), "--model", "/nonexistent/model.bin"}).code, 2);
}

TEST(Cli, UnreachableRemoteScorerIsBackendError) {
  const auto r = invoke({"caption", scene("cat"), "--scorer", "remote:127.0.0.1:1"});
  EXPECT_EQ(r.code, 4);
}

TEST(Cli, RemoteScorerOverExec) {
  const std::string cmd =
      std::string("remote:exec:") + CACHESTEER_PYTHON + " " + (kSourceDir / "tests" / "fake_scorer.py").string();
  const auto r = invoke({"arith", "txt(\"a dog\")", "--scorer", cmd, "--beams", "1", "--set", "decode.max_tokens=2"});
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, TraceWritesOneJsonRecordPerExpansion) {
  const auto dir = testing_support::temp_dir("cli_trace");
  const auto r = invoke({"caption", scene("zebra"), "--beams", "1", "--trace", (dir / "t.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(dir / "t.jsonl");
  std::size_t n = 0;
  for (std::string line; std::getline(in, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"], n);
    EXPECT_TRUE(j.contains("iterations"));
  }
  EXPECT_GT(n, 0u);
  std::filesystem::remove_all(dir);
}

TEST(Cli, TraceWithoutPathGoesToStderr) {
  const auto r = invoke({"caption", scene("cat"), "--beams", "1", "--trace"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("\"step\":0"), std::string::npos);
}

TEST(Cli, ConfigLayering) {
  const auto dir = testing_support::temp_dir("cli_cfg");
  std::ofstream(dir / "c.ini") << "[decode]\nbeams = 3\nmax_tokens = 2\n";
  const auto r = invoke({"caption", scene("cat"), "--config", (dir / "c.ini").string(), "--beams", "2", "--set",
                      "guidance.gd_steps=1", "--out", (dir / "o.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = read_json(dir / "o.json");
  EXPECT_EQ(j["config"]["decode"]["beams"], 2);
  EXPECT_EQ(j["config"]["decode"]["max_tokens"], 2);
  EXPECT_EQ(j["config"]["guidance"]["gd_steps"], 1);
  EXPECT_EQ(invoke({"caption", scene("cat"), "--set", "guidance.nope=1"}).code, 2);
  EXPECT_EQ(invoke({"caption", scene("cat"), "--set", "novalue"}).code, 2);
  std::filesystem::remove_all(dir);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({"caption"}).code, 2);
  EXPECT_EQ(invoke({"caption", scene("cat"), "--beams", "zero"}).code, 2);
}

TEST(Cli, VersionAndHelp) {
  const auto v = invoke({"--version"});
  EXPECT_EQ(v.code, 0);
  EXPECT_EQ(v.out, std::string(kVersion) + "\n");
  const auto h = invoke({"--help"});
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("caption"), std::string::npos);
}
