#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace cachesteer;

namespace {

// Sets an environment variable for the lifetime of the guard.
struct EnvGuard {
  std::string name;
  EnvGuard(std::string n, const char* v) : name(std::move(n)) { ::setenv(name.c_str(), v, 1); }
  ~EnvGuard() { ::unsetenv(name.c_str()); }
};

}  // namespace

TEST(RunConfig, WorkflowDefaults) {
  const auto cap = RunConfig::defaults(Workflow::caption, "fx");
  EXPECT_EQ(cap.weights, std::filesystem::path("fx/model.bin"));
  EXPECT_EQ(cap.decode.f_e, 1.04);
  EXPECT_EQ(cap.decode.t_e, 3u);
  EXPECT_EQ(cap.decode.prompt, "Image of a");
  for (auto w : {Workflow::arithmetic, Workflow::bench}) {
    const auto c = RunConfig::defaults(w);
    EXPECT_EQ(c.decode.f_e, 1.06);
    EXPECT_EQ(c.decode.t_e, 1u);
  }
  EXPECT_EQ(cap.guidance.lambda, 0.2);
  EXPECT_EQ(cap.guidance.tau_c, 0.01);
  EXPECT_EQ(cap.guidance.alpha, 0.3);
  EXPECT_EQ(cap.guidance.gd_steps, 5u);
  EXPECT_EQ(cap.guidance.top_k, 512u);
  EXPECT_EQ(cap.decode.beams, 5u);
  EXPECT_NO_THROW(cap.validate());
}

TEST(RunConfig, LaterLayersOverrideEarlierOnes) {
  const auto dir = testing_support::temp_dir("ini");
  std::ofstream(dir / "c.ini") << "[guidance]\nlambda = 0.5\nalpha = 0.1\n[decode]\nbeams = 3\nmax_tokens = 9\n";
  auto c = RunConfig::defaults(Workflow::caption);
  c.load_ini(dir / "c.ini");
  EXPECT_EQ(c.guidance.lambda, 0.5);
  EXPECT_EQ(c.decode.beams, 3u);
  {
    EnvGuard a("CACHESTEER_GUIDANCE_ALPHA", "0.7");
    EnvGuard b("CACHESTEER_DECODE_BEAMS", "2");
    c.apply_env();
  }
  EXPECT_EQ(c.guidance.alpha, 0.7);
  EXPECT_EQ(c.decode.beams, 2u);
  c.set("decode.beams", "4");  // command line
  EXPECT_EQ(c.decode.beams, 4u);
  EXPECT_EQ(c.guidance.lambda, 0.5);
  EXPECT_EQ(c.decode.max_tokens, 9u);
  std::filesystem::remove_all(dir);
}

TEST(RunConfig, EveryKeyIsSettable) {
  const std::map<std::string, std::string> values{
      {"model.weights", "w.bin"},         {"model.vocab", "v.json"},
      {"model.merges", "m.txt"},          {"scorer.backend", "remote:h:1"},
      {"scorer.cache", "c.bin"},          {"scorer.timeout_ms", "10"},
      {"guidance.lambda", "1"},           {"guidance.tau_c", "0.5"},
      {"guidance.alpha", "0.2"},          {"guidance.gd_steps", "2"},
      {"guidance.top_k", "8"},            {"guidance.lm_temperature", "0.9"},
      {"guidance.max_backtracks", "3"},   {"decode.prompt", "Image of text that says"},
      {"decode.max_tokens", "4"},         {"decode.beams", "2"},
      {"decode.f_e", "1.1"},              {"decode.t_e", "2"},
      {"decode.repetition_window", "5"},  {"decode.repetition_factor", "3"},
      {"decode.capital_penalty", "0.5"},  {"run.seed", "42"},
      {"run.out", "o.json"},              {"run.trace", "t.jsonl"},
      {"run.jobs", "2"},                  {"run.asset_root", "a"}};
  EXPECT_EQ(RunConfig::keys().size(), values.size());
  auto c = RunConfig::defaults(Workflow::caption);
  for (const auto& [k, v] : values) c.set(k, v);
  const auto j = c.to_json();
  EXPECT_EQ(j["model"]["weights"], "w.bin");
  EXPECT_EQ(j["scorer"]["backend"], "remote:h:1");
  EXPECT_EQ(j["guidance"]["top_k"], 8);
  EXPECT_EQ(j["decode"]["prompt"], "Image of text that says");
  EXPECT_EQ(j["decode"]["capital_penalty"], 0.5);
  EXPECT_EQ(j["run"]["seed"], 42);
  EXPECT_EQ(c.decode.seed, 42u);
  EXPECT_EQ(j["version"], kVersion);
  c.set("decode.capital_penalty", "none");
  EXPECT_TRUE(c.to_json()["decode"]["capital_penalty"].is_null());
}

TEST(RunConfig, UnknownKeysAndMalformedValuesAreInputErrors) {
  auto c = RunConfig::defaults(Workflow::caption);
  EXPECT_THROW(c.set("guidance.lamda", "1"), InputError);
  EXPECT_THROW(c.set("guidance.lambda", "abc"), InputError);
  EXPECT_THROW(c.set("guidance.lambda", "1.5x"), InputError);
  EXPECT_THROW(c.set("decode.beams", "-1"), InputError);
  EXPECT_THROW(c.set("decode.beams", "2.5"), InputError);
  EXPECT_THROW(c.set("decode.beams", ""), InputError);
  EnvGuard bad("CACHESTEER_GUIDANCE_TOP_K", "many");
  EXPECT_THROW(c.apply_env(), InputError);
}

TEST(RunConfig, IniErrors) {
  const auto dir = testing_support::temp_dir("ini_bad");
  auto c = RunConfig::defaults(Workflow::caption);
  EXPECT_THROW(c.load_ini(dir / "missing.ini"), InputError);
  std::ofstream(dir / "unknown.ini") << "[guidance]\nlamda = 1\n";
  EXPECT_THROW(c.load_ini(dir / "unknown.ini"), InputError);
  std::ofstream(dir / "nosection.ini") << "lambda = 1\n";
  EXPECT_THROW(c.load_ini(dir / "nosection.ini"), InputError);
  std::ofstream(dir / "garbage.ini") << "[guidance\nlambda\n";
  EXPECT_THROW(c.load_ini(dir / "garbage.ini"), InputError);
  std::filesystem::remove_all(dir);
}

TEST(RunConfig, ValidationRejectsOutOfRangeSettings) {
  auto c = RunConfig::defaults(Workflow::caption);
  c.set("guidance.tau_c", "0");
  EXPECT_THROW(c.validate(), InputError);
  c = RunConfig::defaults(Workflow::caption);
  c.set("run.jobs", "0");
  EXPECT_THROW(c.validate(), InputError);
  c = RunConfig::defaults(Workflow::caption);
  c.set("scorer.backend", "openai");
  EXPECT_THROW(c.validate(), InputError);
  c = RunConfig::defaults(Workflow::caption);
  c.set("decode.beams", "0");
  EXPECT_THROW(c.validate(), InputError);
}
