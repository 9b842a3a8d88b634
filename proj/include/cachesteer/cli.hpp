#pragma once

/**
 * Command-line workflows. `run` is the whole program minus process setup so
 * tests can drive it in-process with captured streams.
 *
 *   cachesteer caption IMAGE      steered 5-beam caption of an image file
 *   cachesteer arith EXPR         generation from an embedding expression
 *   cachesteer bench MANIFEST     visual-relations benchmark report
 *   cachesteer selftest           gradient / tokenizer / steering checks
 *
 * Exit codes: 0 ok, 1 selftest failure, 2 usage or input, 3 domain, 4 backend.
 */

#include "cachesteer/run_config.hpp"
#include "cachesteer/remote_scorer.hpp"
#include "cachesteer/vr_bench.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>

namespace cachesteer::cli {

inline constexpr int kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2, kExitDomain = 3, kExitBackend = 4;

struct SelftestRow {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Builds the scorer stack the config describes: backend, then optional cache.
inline std::unique_ptr<Scorer> make_scorer(const RunConfig& cfg, std::unique_ptr<Scorer>& backend) {
  if (cfg.scorer == "toy") {
    backend = std::make_unique<ToyScorer>();
  } else {
    backend = std::make_unique<RemoteScorer>(cfg.scorer.substr(7), std::chrono::milliseconds(cfg.scorer_timeout_ms));
  }
  if (cfg.scorer_cache.empty()) return nullptr;
  return std::make_unique<CachedScorer>(*backend, cfg.scorer_cache);
}

/// Token text is raw bytes; anything that is not valid UTF-8 becomes U+FFFD.
inline std::string dump_json(const nlohmann::json& j, int indent = -1) {
  return j.dump(indent, ' ', false, nlohmann::json::error_handler_t::replace);
}

namespace detail {

inline std::string random_bytes(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(0, 48), byte(0, 255), kind(0, 3);
  static constexpr std::string_view kAscii = " abcdefghijklmnopqrstuvwxyzIMAGE.,'!?\n\t0123456789";
  std::string s;
  for (int i = len(rng); i > 0; --i) {
    // mix printable text with raw bytes so both merge paths and byte fallback are exercised
    s += kind(rng) == 0 ? static_cast<char>(byte(rng)) : kAscii[static_cast<std::size_t>(byte(rng)) % kAscii.size()];
  }
  return s;
}

}  // namespace detail

inline std::vector<SelftestRow> selftest(const RunConfig& cfg, double epsilon, const Weights<float>& w,
                                         const Vocab& vocab, Scorer& scorer) {
  if (!(epsilon > 0)) throw InputError("--epsilon must be positive");
  std::vector<SelftestRow> rows;

  {
    const auto wd = w.cast<double>();
    const auto ids = vocab.encode("Image of a cat").ids;
    ContextCache<double> cache(wd.config.n_layers, wd.config.d_model);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) cache.append(forward_step(ids[i], cache, wd).entries);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> n01;
    std::vector<double> g(static_cast<std::size_t>(wd.config.vocab_size));
    for (auto& x : g) x = n01(rng);
    const auto rep = finite_difference_check<double>(ids.back(), cache, wd, linear_prob_loss<double>(g), epsilon,
                                                     500, cfg.seed);
    std::ostringstream d;
    d << "max rel err " << std::scientific << std::setprecision(2) << rep.max_rel_err << " over "
      << rep.coords_checked << " coords";
    rows.push_back({"gradient", rep.max_rel_err < 1e-4, d.str()});
  }

  {
    std::mt19937_64 rng(cfg.seed);
    std::size_t bad = 0;
    for (int i = 0; i < 1000; ++i) {
      const auto s = detail::random_bytes(rng);
      if (vocab.decode(vocab.encode(s)) != s) ++bad;
    }
    rows.push_back({"tokenizer", bad == 0, std::to_string(1000 - bad) + "/1000 round-trips"});
  }

  {
    const Engine<float> eng{w, vocab, scorer};
    const auto scene = cfg.weights.parent_path() / "scenes" / "cat.img";
    const auto target = scorer.embed_image(scene);
    const auto ids = vocab.encode(cfg.decode.prompt).ids;
    ContextCache<float> cache(w.config.n_layers, w.config.d_model);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) cache.append(forward_step(ids[i], cache, w).entries);
    const auto r = steer_cache<float>(cache, ids.back(), target, ids, cfg.guidance, eng);
    bool mono = true;
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& it : r.iterations) {
      if (it.total_loss > prev + 1e-6) mono = false;
      prev = it.total_loss;
    }
    if (r.total_loss > prev + 1e-6) mono = false;
    std::ostringstream d;
    const double start = r.iterations.empty() ? r.total_loss : r.iterations.front().total_loss;
    d << "loss " << std::fixed << std::setprecision(4) << start << " -> " << r.total_loss;
    rows.push_back({"steering", mono, d.str()});
  }
  return rows;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
               const std::filesystem::path& fixtures) {
  CLI::App app{"Image-guided GPT-2 decoding by context-cache steering", "cachesteer"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file, scorer, model, vocab_path, merges, prompt, out_path, asset_root;
  std::optional<std::string> trace;
  std::optional<std::size_t> beams, jobs;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  double epsilon = 1e-3;

  app.add_option("--config", config_file, "INI file with [section] key=value overrides");
  app.add_option("--scorer", scorer, "toy | remote:HOST:PORT | remote:exec:COMMAND");
  app.add_option("--model", model, "weights container");
  app.add_option("--vocab", vocab_path, "vocab.json");
  app.add_option("--merges", merges, "merges.txt");
  app.add_option("--prompt", prompt, "prefix prompt");
  app.add_option("--beams", beams, "beam count");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--trace", trace, "per-step JSONL trace (stderr when no path given)")->expected(0, 1);
  app.add_option("--out", out_path, "output JSON path");
  app.add_option("--jobs", jobs, "bench worker threads");
  app.add_option("--asset-root", asset_root, "base directory for relative image paths");
  app.add_option("--set", overrides, "section.key=value, repeatable");

  std::string image, expr, manifest;
  auto* caption_cmd = app.add_subcommand("caption", "caption an image file");
  caption_cmd->add_option("image", image, "image file")->required();
  auto* arith_cmd = app.add_subcommand("arith", "generate from an embedding expression");
  arith_cmd->add_option("expr", expr, "e.g. img(a.png) - img(b.png) + txt(\"x\")")->required();
  auto* bench_cmd = app.add_subcommand("bench", "run a visual-relations manifest");
  bench_cmd->add_option("manifest", manifest, "manifest JSON")->required();
  auto* self_cmd = app.add_subcommand("selftest", "gradient, tokenizer and steering checks");
  self_cmd->add_option("--epsilon", epsilon, "finite-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const Workflow wf = app.got_subcommand(caption_cmd) ? Workflow::caption
                        : app.got_subcommand(arith_cmd) ? Workflow::arithmetic
                        : app.got_subcommand(bench_cmd) ? Workflow::bench
                                                        : Workflow::selftest;
    auto cfg = RunConfig::defaults(wf, fixtures);
    if (!config_file.empty()) cfg.load_ini(config_file);
    cfg.apply_env();
    auto flag = [&](const char* key, const std::string& v) {
      if (!v.empty()) cfg.set(key, v);
    };
    flag("scorer.backend", scorer);
    flag("model.weights", model);
    flag("model.vocab", vocab_path);
    flag("model.merges", merges);
    flag("decode.prompt", prompt);
    flag("run.out", out_path);
    flag("run.asset_root", asset_root);
    if (beams) cfg.set("decode.beams", std::to_string(*beams));
    if (jobs) cfg.set("run.jobs", std::to_string(*jobs));
    if (seed) cfg.set("run.seed", std::to_string(*seed));
    if (trace) cfg.set("run.trace", trace->empty() ? "-" : *trace);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InputError("--set expects section.key=value, got " + kv);
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (wf == Workflow::bench && cfg.asset_root.empty()) cfg.asset_root = std::filesystem::path(manifest).parent_path();
    cfg.validate();
    if (wf == Workflow::selftest && !(epsilon > 0)) throw InputError("--epsilon must be positive");

    const auto weights = Weights<float>::load(cfg.weights);
    const auto vocab = Vocab::load(cfg.vocab, cfg.merges);
    if (vocab.size() != static_cast<std::size_t>(weights.config.vocab_size)) {
      throw InputError("vocab size " + std::to_string(vocab.size()) + " does not match the model's " +
                       std::to_string(weights.config.vocab_size));
    }
    std::unique_ptr<Scorer> backend;
    auto cached = make_scorer(cfg, backend);
    Scorer& sc = cached ? *cached : *backend;
    const Engine<float> eng{weights, vocab, sc};

    std::ofstream trace_file;
    TraceSink sink;
    if (!cfg.trace.empty()) {
      std::ostream* ts = &err;
      if (cfg.trace != "-") {
        trace_file.open(cfg.trace);
        if (!trace_file) throw InputError("cannot write trace: " + cfg.trace.string());
        ts = &trace_file;
      }
      sink = [ts](const nlohmann::json& j) { *ts << dump_json(j) << "\n"; };
    }

    auto write_json = [&](const std::filesystem::path& p, const nlohmann::json& j) {
      std::ofstream f(p);
      if (!f) throw InputError("cannot write " + p.string());
      f << dump_json(j, 2) << "\n";
    };
    auto beams_json = [](const BeamSearchResult& r) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& b : r.beams) {
        a.push_back({{"caption", b.caption}, {"mean_clip_loss", b.mean_clip_loss}, {"cum_log_prob", b.cum_log_prob}});
      }
      return a;
    };

    switch (wf) {
      case Workflow::caption: {
        const auto target = sc.embed_image(image);
        const auto r = generate_beam<float>(target, cfg.guidance, cfg.decode, eng, sink);
        out << r.best.caption << "\n";
        if (!cfg.out.empty()) {
          write_json(cfg.out, {{"version", kVersion},
                               {"config", cfg.to_json()},
                               {"workflow", "caption"},
                               {"image", image},
                               {"caption", r.best.caption},
                               {"mean_clip_loss", r.best.mean_clip_loss},
                               {"beams", beams_json(r)}});
        }
        return kExitOk;
      }
      case Workflow::arithmetic: {
        const auto target = evaluate(expr, sc, cfg.asset_root);
        const auto r = generate_beam<float>(target, cfg.guidance, cfg.decode, eng, sink);
        out << r.best.caption << "\n";
        if (!cfg.out.empty()) {
          write_json(cfg.out, {{"version", kVersion},
                               {"config", cfg.to_json()},
                               {"workflow", "arith"},
                               {"expression", expr},
                               {"target_norm", target.raw_norm},
                               {"text", r.best.caption},
                               {"mean_clip_loss", r.best.mean_clip_loss},
                               {"beams", beams_json(r)}});
        }
        return kExitOk;
      }
      case Workflow::bench: {
        const auto instances = load_manifest(manifest);
        BenchSettings<float> s{cfg.guidance, cfg.decode, cfg.asset_root, cfg.jobs};
        const auto rep = run_benchmark<float>(instances, s, eng);
        const auto j = report_json(rep, cfg.to_json());
        if (cfg.out.empty()) {
          out << dump_json(j, 2) << "\n";
        } else {
          write_json(cfg.out, j);
          auto csv_path = cfg.out;
          csv_path.replace_extension(".csv");
          std::ofstream csv(csv_path);
          if (!csv) throw InputError("cannot write " + csv_path.string());
          csv << report_csv(rep);
          out << std::fixed << std::setprecision(3) << "instances " << rep.instances.size() << "  R@5 "
              << rep.overall.recall_at_5 << "  BLEU-1 " << rep.overall.bleu1 << "  CLIP-S " << rep.overall.clip_score
              << "  failures " << rep.failures << "\n";
        }
        return kExitOk;
      }
      case Workflow::selftest: {
        const auto rows = selftest(cfg, epsilon, weights, vocab, sc);
        bool all = true;
        for (const auto& r : rows) {
          out << std::left << std::setw(10) << r.name << (r.pass ? "PASS  " : "FAIL  ") << r.detail << "\n";
          all = all && r.pass;
        }
        if (!cfg.out.empty()) {
          nlohmann::json checks = nlohmann::json::array();
          for (const auto& r : rows) checks.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
          write_json(cfg.out, {{"version", kVersion}, {"config", cfg.to_json()}, {"checks", checks}});
        }
        return all ? kExitOk : kExitCheckFailed;
      }
    }
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  } catch (const BackendError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBackend;
  }
  return kExitOk;
}

}  // namespace cachesteer::cli
