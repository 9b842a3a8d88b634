#pragma once

/**
 * Resolved run configuration: defaults <- INI file <- CACHESTEER_* environment
 * <- command-line flags. Every key is addressed as "section.key"; the same
 * setter serves all three override layers.
 *
 *   [model]    weights vocab merges
 *   [scorer]   backend cache timeout_ms
 *   [guidance] lambda tau_c alpha gd_steps top_k lm_temperature max_backtracks
 *   [decode]   prompt max_tokens beams f_e t_e repetition_window
 *              repetition_factor capital_penalty
 *   [run]      seed out trace jobs asset_root
 *
 * Environment variables are CACHESTEER_<SECTION>_<KEY>, e.g. CACHESTEER_DECODE_BEAMS.
 */

#include "cachesteer/decoder.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>

namespace cachesteer {

enum class Workflow { caption, arithmetic, bench, selftest };

struct RunConfig {
  std::filesystem::path weights, vocab, merges;
  std::string scorer = "toy";  // "toy" or "remote:<host:port | exec:cmd>"
  std::filesystem::path scorer_cache;
  std::size_t scorer_timeout_ms = 60000;
  GuidanceConfig guidance;
  DecodeConfig decode;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  std::filesystem::path trace;
  std::size_t jobs = 1;
  std::filesystem::path asset_root;

  /// Arithmetic-style workflows use the stronger, earlier end-token pressure.
  static RunConfig defaults(Workflow w, const std::filesystem::path& fixtures = "fixtures/toy") {
    RunConfig c;
    c.weights = fixtures / "model.bin";
    c.vocab = fixtures / "vocab.json";
    c.merges = fixtures / "merges.txt";
    c.decode = w == Workflow::arithmetic || w == Workflow::bench ? DecodeConfig::arithmetic()
                                                                 : DecodeConfig::captioning();
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    const auto& s = setters();
    auto it = s.find(key);
    if (it == s.end()) throw InputError("unknown config key: " + key);
    try {
      it->second(*this, value);
    } catch (const InputError&) {
      throw;
    } catch (const std::exception&) {
      throw InputError("invalid value for " + key + ": " + value);
    }
  }

  static std::vector<std::string> keys() {
    std::vector<std::string> out;
    for (const auto& [k, _] : setters()) out.push_back(k);
    return out;
  }

  void load_ini(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw InputError("config file not found: " + path.string());
    boost::property_tree::ptree pt;
    try {
      boost::property_tree::read_ini(path.string(), pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw InputError("malformed config file: " + std::string(e.what()));
    }
    for (const auto& [section, body] : pt) {
      if (body.empty()) throw InputError("config keys must live in a [section]: " + section);
      for (const auto& [key, val] : body) set(section + "." + key, val.data());
    }
  }

  void apply_env() {
    for (const auto& key : keys()) {
      std::string name = "CACHESTEER_";
      for (char c : key) name += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      if (const char* v = std::getenv(name.c_str())) set(key, v);
    }
  }

  void validate() const {
    guidance.validate();
    decode.validate();
    if (jobs == 0) throw InputError("run.jobs must be positive");
    if (scorer != "toy" && !scorer.starts_with("remote:")) {
      throw InputError("scorer must be 'toy' or 'remote:ADDR', got " + scorer);
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json cp = decode.capital_penalty ? nlohmann::json(*decode.capital_penalty) : nlohmann::json(nullptr);
    return {{"version", kVersion},
            {"model", {{"weights", weights.string()}, {"vocab", vocab.string()}, {"merges", merges.string()}}},
            {"scorer", {{"backend", scorer}, {"cache", scorer_cache.string()}, {"timeout_ms", scorer_timeout_ms}}},
            {"guidance",
             {{"lambda", guidance.lambda},
              {"tau_c", guidance.tau_c},
              {"alpha", guidance.alpha},
              {"gd_steps", guidance.gd_steps},
              {"top_k", guidance.top_k},
              {"lm_temperature", guidance.lm_temperature},
              {"max_backtracks", guidance.max_backtracks}}},
            {"decode",
             {{"prompt", decode.prompt},
              {"max_tokens", decode.max_tokens},
              {"beams", decode.beams},
              {"f_e", decode.f_e},
              {"t_e", decode.t_e},
              {"repetition_window", decode.repetition_window},
              {"repetition_factor", decode.repetition_factor},
              {"capital_penalty", cp}}},
            {"run",
             {{"seed", seed},
              {"out", out.string()},
              {"trace", trace.string()},
              {"jobs", jobs},
              {"asset_root", asset_root.string()}}}};
  }

 private:
  using Setter = std::function<void(RunConfig&, const std::string&)>;

  static std::size_t to_count(const std::string& v) {
    if (v.empty() || v.front() == '-') throw InputError("expected a non-negative integer, got " + v);
    std::size_t pos = 0;
    const auto n = std::stoull(v, &pos);
    if (pos != v.size()) throw InputError("expected a non-negative integer, got " + v);
    return static_cast<std::size_t>(n);
  }
  static double to_real(const std::string& v) {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw InputError("expected a number, got " + v);
    return d;
  }

  static const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> m = {
        {"model.weights", [](RunConfig& c, const std::string& v) { c.weights = v; }},
        {"model.vocab", [](RunConfig& c, const std::string& v) { c.vocab = v; }},
        {"model.merges", [](RunConfig& c, const std::string& v) { c.merges = v; }},
        {"scorer.backend", [](RunConfig& c, const std::string& v) { c.scorer = v; }},
        {"scorer.cache", [](RunConfig& c, const std::string& v) { c.scorer_cache = v; }},
        {"scorer.timeout_ms", [](RunConfig& c, const std::string& v) { c.scorer_timeout_ms = to_count(v); }},
        {"guidance.lambda", [](RunConfig& c, const std::string& v) { c.guidance.lambda = to_real(v); }},
        {"guidance.tau_c", [](RunConfig& c, const std::string& v) { c.guidance.tau_c = to_real(v); }},
        {"guidance.alpha", [](RunConfig& c, const std::string& v) { c.guidance.alpha = to_real(v); }},
        {"guidance.gd_steps", [](RunConfig& c, const std::string& v) { c.guidance.gd_steps = to_count(v); }},
        {"guidance.top_k", [](RunConfig& c, const std::string& v) { c.guidance.top_k = to_count(v); }},
        {"guidance.lm_temperature", [](RunConfig& c, const std::string& v) { c.guidance.lm_temperature = to_real(v); }},
        {"guidance.max_backtracks", [](RunConfig& c, const std::string& v) { c.guidance.max_backtracks = to_count(v); }},
        {"decode.prompt", [](RunConfig& c, const std::string& v) { c.decode.prompt = v; }},
        {"decode.max_tokens", [](RunConfig& c, const std::string& v) { c.decode.max_tokens = to_count(v); }},
        {"decode.beams", [](RunConfig& c, const std::string& v) { c.decode.beams = to_count(v); }},
        {"decode.f_e", [](RunConfig& c, const std::string& v) { c.decode.f_e = to_real(v); }},
        {"decode.t_e", [](RunConfig& c, const std::string& v) { c.decode.t_e = to_count(v); }},
        {"decode.repetition_window", [](RunConfig& c, const std::string& v) { c.decode.repetition_window = to_count(v); }},
        {"decode.repetition_factor", [](RunConfig& c, const std::string& v) { c.decode.repetition_factor = to_real(v); }},
        {"decode.capital_penalty",
         [](RunConfig& c, const std::string& v) {
           if (v.empty() || v == "none") {
             c.decode.capital_penalty.reset();
           } else {
             c.decode.capital_penalty = to_real(v);
           }
         }},
        {"run.seed",
         [](RunConfig& c, const std::string& v) {
           c.seed = to_count(v);
           c.decode.seed = c.seed;
         }},
        {"run.out", [](RunConfig& c, const std::string& v) { c.out = v; }},
        {"run.trace", [](RunConfig& c, const std::string& v) { c.trace = v; }},
        {"run.jobs", [](RunConfig& c, const std::string& v) { c.jobs = to_count(v); }},
        {"run.asset_root", [](RunConfig& c, const std::string& v) { c.asset_root = v; }},
    };
    return m;
  }
};

}  // namespace cachesteer
