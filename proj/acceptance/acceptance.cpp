// Acceptance suite: one PASS/FAIL line per requirement, then a summary.
// `--allow-fail NAME` keeps the exit status at 0 for a known, documented failure;
// the line itself still reads FAIL.

#include "../tests/support.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

using namespace cachesteer;
using testing_support::kFixtures;
using testing_support::kGpt2Dir;
using testing_support::kSourceDir;
using testing_support::toy;

namespace {

struct Outcome {
  enum { pass, fail, skip } status = fail;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int prec = 3, bool sci = false) {
  std::ostringstream os;
  if (sci) os << std::scientific;
  else os << std::fixed;
  os << std::setprecision(prec) << x;
  return os.str();
}

struct PromptState {
  ContextCache<float> cache;
  TokenId token;
  std::vector<TokenId> prefix;
};

PromptState prompt_state(const std::string& prompt) {
  auto& t = toy();
  auto [cache, tok] = testing_support::steering_state<float>(prompt, t.weights, t.vocab);
  return {std::move(cache), tok, t.vocab.encode(prompt).ids};
}

const std::vector<std::string> kScenes{"cat", "dog", "zebra"};

Outcome gradient() {
  const auto t0 = Clock::now();
  auto& t = toy();
  const auto w = t.weights.cast<double>();
  auto [cache, tok] = testing_support::steering_state<double>("Image of a cat", w, t.vocab);
  std::mt19937_64 rng(0);
  std::normal_distribution<double> n01;
  std::vector<double> g(static_cast<std::size_t>(w.config.vocab_size));
  for (auto& x : g) x = n01(rng);
  const auto rep = finite_difference_check<double>(tok, cache, w, linear_prob_loss<double>(g), 1e-3, 500, 0);
  const double secs = seconds_since(t0);
  const bool ok = cache.positions() == 3 && rep.max_rel_err < 1e-4 && secs < 30;
  return {ok ? Outcome::pass : Outcome::fail,
          "max rel err " + fmt(rep.max_rel_err, 2, true) + " over " + std::to_string(rep.coords_checked) +
              " coords, " + std::to_string(cache.positions()) + " positions, " + fmt(secs, 1) + " s"};
}

Outcome steering() {
  auto& t = toy();
  std::size_t improved = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto sc = testing_support::scenario(seed);
    const auto s = prompt_state(sc.prompt);
    const auto target = t.scorer.embed_image_bytes(sc.scene);
    const auto r = steer_cache<float>(s.cache, s.token, target, s.prefix, GuidanceConfig{}, t.engine);
    if (!r.iterations.empty() && r.total_loss < r.iterations.front().total_loss) ++improved;
  }
  std::size_t monotone = 0, runs = 0;
  for (const auto& scene : kScenes) {
    for (const char* prompt : {"Image of a", "Image of a dog and a", "Image of a man on the"}) {
      const auto s = prompt_state(prompt);
      const auto r = steer_cache<float>(s.cache, s.token, t.scene(scene), s.prefix, GuidanceConfig{}, t.engine);
      bool ok = !r.iterations.empty();
      double prev = ok ? r.iterations.front().total_loss : 0;
      for (const auto& it : r.iterations) {
        ok = ok && it.total_loss <= prev + 1e-6;
        prev = it.total_loss;
      }
      ok = ok && r.total_loss <= prev + 1e-6;
      monotone += ok;
      ++runs;
    }
  }
  const bool ok = improved >= 19 && monotone == runs;
  return {ok ? Outcome::pass : Outcome::fail, std::to_string(improved) + "/20 scenarios improved, " +
                                                  std::to_string(monotone) + "/" + std::to_string(runs) +
                                                  " fixture runs monotone"};
}

Outcome fluency() {
  auto& t = toy();
  GuidanceConfig heavy;
  heavy.lambda = 1e4;
  GuidanceConfig off;
  off.gd_steps = 0;
  double worst = 0;
  bool identical = true;
  for (const auto& scene : kScenes) {
    const auto s = prompt_state("Image of a");
    const auto r = steer_cache<float>(s.cache, s.token, t.scene(scene), s.prefix, heavy, t.engine);
    worst = std::max(worst, testing_support::kl(r.steered_probs, r.reference_probs));
    const auto z = steer_cache<float>(s.cache, s.token, t.scene(scene), s.prefix, off, t.engine);
    const auto direct = softmax<float>(forward_step(s.token, s.cache, t.weights).logits);
    identical = identical && z.steered_probs == direct && z.steered_probs == z.reference_probs;
  }
  const bool ok = worst < 1e-3 && identical;
  return {ok ? Outcome::pass : Outcome::fail, "max KL " + fmt(worst, 2, true) + " at lambda=1e4; gd_steps=0 " +
                                                  (identical ? "bit-identical" : "DIFFERS")};
}

Outcome potentials() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<std::size_t> len(1, 64);
  std::size_t exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(len(rng));
    for (auto& x : s) x = u(rng);
    const auto p = potentials_from_similarities<double>(s, 1e-6);
    exact += std::max_element(p.begin(), p.end()) - p.begin() == std::max_element(s.begin(), s.end()) - s.begin();
  }
  // similarities 0.30, 0.28, 0.10 at tau 0.01: exp(0), exp(-2), exp(-20), normalized
  const std::vector<double> s3{0.30, 0.28, 0.10};
  const std::vector<double> oracle{0.8807970763788321, 0.11920292180570964, 1.815458084611521e-09};
  const auto p3 = potentials_from_similarities<double>(s3, 0.01);
  double err = 0;
  for (std::size_t k = 0; k < 3; ++k) err = std::max(err, std::abs(p3[k] - oracle[k]));
  const bool ok = exact == 100 && err < 1e-6;
  return {ok ? Outcome::pass : Outcome::fail,
          std::to_string(exact) + "/100 cold-limit argmax exact, 3-candidate error " + fmt(err, 1, true)};
}

Outcome heuristics() {
  auto& t = toy();
  const auto V = t.vocab.size();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 1);
  std::vector<double> p(V);
  double sum = 0;
  for (auto& x : p) sum += (x = u(rng));
  for (auto& x : p) x /= sum;

  // On a uniform input, scaling by a power of two commutes exactly with the
  // shared normalizer, so "halved" and "multiplied by 1/8" are checked bit-exactly.
  const std::vector<double> flat(V, 1.0 / static_cast<double>(V));

  DecodeConfig rep;
  rep.t_e = 1000;
  const std::vector<TokenId> gen{11, 40, 40, 77, 90};  // window of 4: 40, 40, 77, 90
  const auto r = apply_heuristics<double>(flat, gen, 5, rep, t.vocab);
  bool halved = true;
  const std::set<std::size_t> penalized{40, 77, 90};
  for (std::size_t v = 0; v < V; ++v) {
    halved = halved && (penalized.count(v) ? r[v] * 2 == r[0] : r[v] == r[0]);
  }

  DecodeConfig gate;
  gate.repetition_window = 0;
  gate.t_e = 4;
  gate.f_e = 1.3;
  DecodeConfig never = gate;
  never.t_e = 1'000'000;
  bool inert = true;
  for (std::size_t step = 0; step < 4; ++step) {
    inert = inert && apply_heuristics<double>(p, {}, step, gate, t.vocab) ==
                         apply_heuristics<double>(p, {}, step, never, t.vocab);
  }
  inert = inert && apply_heuristics<double>(p, {}, 4, gate, t.vocab) != apply_heuristics<double>(p, {}, 4, never, t.vocab);

  DecodeConfig cap;
  cap.repetition_window = 0;
  cap.t_e = 1000;
  cap.capital_penalty = 0.125;
  const auto c = apply_heuristics<double>(flat, {}, 0, cap, t.vocab);
  std::size_t ref = 0;
  while (t.vocab.starts_capitalized(static_cast<TokenId>(ref))) ++ref;
  bool capital = true;
  std::size_t n_cap = 0;
  for (std::size_t v = 0; v < V; ++v) {
    // independent oracle for the capitalized set: first ASCII letter, after an optional leading space
    const auto& b = t.vocab.token_bytes(static_cast<TokenId>(v));
    bool upper = false;
    for (std::size_t i = !b.empty() && b[0] == ' ' ? 1 : 0; i < b.size(); ++i) {
      const auto ch = static_cast<unsigned char>(b[i]);
      if (ch < 0x80 && std::isalpha(ch)) {
        upper = std::isupper(ch) != 0;
        break;
      }
    }
    n_cap += upper;
    capital = capital && (upper ? c[v] * 8 == c[ref] : c[v] == c[ref]);
  }
  const bool ok = halved && inert && capital;
  return {ok ? Outcome::pass : Outcome::fail, std::string("repetition ") + (halved ? "halved" : "WRONG") +
                                                  ", end-token gate " + (inert ? "inert before t_e" : "WRONG") +
                                                  ", capital prior " + (capital ? "exact" : "WRONG") + " on " +
                                                  std::to_string(n_cap) + " tokens"};
}

Outcome beam_contract() {
  auto& t = toy();
  bool single = true, minimal = true;
  DecodeConfig one;
  one.beams = 1;
  for (const auto& scene : kScenes) {
    const auto g = generate_greedy<float>(t.scene(scene), GuidanceConfig{}, one, t.engine);
    const auto b = generate_beam<float>(t.scene(scene), GuidanceConfig{}, one, t.engine);
    single = single && g.caption == b.best.caption && g.tokens == b.best.tokens;
    const auto five = generate_beam<float>(t.scene(scene), GuidanceConfig{}, DecodeConfig{}, t.engine);
    for (const auto& f : five.beams) minimal = minimal && f.mean_clip_loss >= five.best.mean_clip_loss;
  }
  const auto greedy = generate_greedy<float>(t.scene("zebra"), GuidanceConfig{}, DecodeConfig{}, t.engine);
  const auto beam = generate_beam<float>(t.scene("zebra"), GuidanceConfig{}, DecodeConfig{}, t.engine);
  const bool multi = beam.best.caption.find("zebra") != std::string::npos &&
                     greedy.caption.find("zebra") == std::string::npos;
  const bool ok = single && minimal && multi;
  return {ok ? Outcome::pass : Outcome::fail, std::string("beams=1 ") + (single ? "== greedy" : "!= greedy") +
                                                  ", best beam " + (minimal ? "minimal" : "NOT minimal") +
                                                  ", multi-token word: beam \"" + beam.best.caption +
                                                  "\" vs greedy \"" + greedy.caption + "\""};
}

Outcome arithmetic() {
  auto& t = toy();
  const auto vr = kFixtures / "vr";
  const auto a = evaluate("img(images/cuba_land.img)", t.scorer, vr);
  const auto back = evaluate("img(images/cuba_land.img) - img(images/lima_city.img) + img(images/lima_city.img)",
                             t.scorer, vr);
  double diff = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) diff = std::max(diff, std::abs(double(a.values[i]) - back.values[i]));
  bool degenerate = false;
  try {
    evaluate("img(images/cuba_land.img) - img(images/cuba_land.img)", t.scorer, vr);
  } catch (const DomainError&) {
    degenerate = true;
  }
  const auto target =
      evaluate("img(images/oslo_city.img) - img(images/oslo_land.img) + img(images/lima_land.img)", t.scorer, vr);
  const auto prefix = t.vocab.encode("Image of a").ids;
  std::vector<TokenId> cands(t.vocab.size());
  std::iota(cands.begin(), cands.end(), 0);
  const auto p0 = clip_potentials<double>(prefix, cands, target, t.scorer, t.vocab, 0.01);
  const auto arg0 = std::max_element(p0.potentials.begin(), p0.potentials.end()) - p0.potentials.begin();
  bool invariant = true;
  double worst = 0;
  for (double scale : {1e-3, 0.5, 3.0, 1e3}) {
    auto scaled = target;
    for (auto& v : scaled.values) v = static_cast<float>(v * scale);
    const auto p = clip_potentials<double>(prefix, cands, scaled, t.scorer, t.vocab, 0.01);
    invariant = invariant && std::max_element(p.potentials.begin(), p.potentials.end()) - p.potentials.begin() == arg0;
    for (std::size_t k = 0; k < cands.size(); ++k) worst = std::max(worst, std::abs(p.potentials[k] - p0.potentials[k]));
  }
  const bool ok = diff < 1e-5 && degenerate && invariant && worst < 1e-6;
  return {ok ? Outcome::pass : Outcome::fail, "(a-b)+b error " + fmt(diff, 1, true) + ", e-e " +
                                                  (degenerate ? "rejected" : "ACCEPTED") + ", rescaling drift " +
                                                  fmt(worst, 1, true) + (invariant ? "" : " (argmax moved)")};
}

Outcome tokenizer() {
  auto& t = toy();
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 64);
  std::size_t ok_trips = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string s(static_cast<std::size_t>(len(rng)), '\0');
    for (auto& c : s) c = static_cast<char>(byte(rng));
    ok_trips += t.vocab.decode(t.vocab.encode(s)) == s;
  }
  const std::string trips = std::to_string(ok_trips) + "/1000 round-trips";
  if (!std::filesystem::exists(kGpt2Dir / "vocab.bpe") || !std::filesystem::exists(kGpt2Dir / "encoder.json")) {
    std::cerr << "warning: GPT-2 merges not found under " << kGpt2Dir.string()
              << "; zebra split check skipped (tools/fetch_gpt2_vocab.sh)\n";
    return {ok_trips == 1000 ? Outcome::skip : Outcome::fail, trips + "; GPT-2 merges absent, split check skipped"};
  }
  const auto gpt2 = Vocab::load(kGpt2Dir / "encoder.json", kGpt2Dir / "vocab.bpe");
  auto split = [&](const char* text) {
    std::string out;
    for (auto id : gpt2.encode(text).ids) out += (out.empty() ? "" : "+") + gpt2.token_bytes(id);
    return out;
  };
  const auto bare = split("zebra"), spaced = split(" zebra");
  const bool zeb_ra = bare == "zeb+ra" || spaced == " zeb+ra";
  const bool ok = ok_trips == 1000 && zeb_ra;
  return {ok ? Outcome::pass : Outcome::fail,
          trips + "; GPT-2 splits \"zebra\" as \"" + bare + "\" and \" zebra\" as \"" + spaced + "\", not zeb+ra"};
}

Outcome vr_harness(Clock::time_point suite_start) {
  auto& t = toy();
  BenchSettings<float> s;
  s.asset_root = kFixtures / "vr";
  const auto instances = load_manifest(kFixtures / "vr" / "manifest.json");
  const auto rep = run_benchmark<float>(instances, s, t.engine);

  // hand-computed metric values
  const bool metrics = bleu1("the flag of italy", "italy") == 0.25 && bleu1("US", "USA") == 0.0 &&
                       recall_at_5("a b c d italy", "italy") == 1 && recall_at_5("a b c d e italy", "italy") == 0 &&
                       std::abs(bleu1("paris", "paris france") - std::exp(-1.0)) < 1e-15;

  const auto dir = testing_support::temp_dir("acceptance_vr");
  const auto report = dir / "report.json";
  std::ofstream(report) << report_json(rep, RunConfig::defaults(Workflow::bench, kFixtures).to_json()).dump(
      2, ' ', false, nlohmann::json::error_handler_t::replace);
  const std::string cmd = std::string(CACHESTEER_PYTHON) + " \"" + (kSourceDir / "tools" / "validate_json.py").string() +
                          "\" \"" + (kSourceDir / "schemas" / "bench_report.schema.json").string() + "\" \"" +
                          report.string() + "\" > /dev/null";
  const bool schema = std::system(cmd.c_str()) == 0;
  std::filesystem::remove_all(dir);

  const double total = seconds_since(suite_start);
  const bool ok = instances.size() == 10 && rep.failures == 0 && rep.overall.recall_at_5 == 1.0 &&
                  rep.overall.bleu1 >= 0.5 && metrics && schema && total < 300;
  return {ok ? Outcome::pass : Outcome::fail,
          std::to_string(instances.size()) + " instances, R@5 " + fmt(rep.overall.recall_at_5) + ", BLEU-1 " +
              fmt(rep.overall.bleu1) + ", metrics " + (metrics ? "ok" : "WRONG") + ", schema " +
              (schema ? "valid" : "INVALID") + ", suite " + fmt(total, 1) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> allowed;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--allow-fail" && i + 1 < argc) {
      allowed.insert(argv[++i]);
    } else {
      std::cerr << "usage: acceptance [--allow-fail NAME]...\n";
      return 2;
    }
  }

  const auto start = Clock::now();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"gradient", gradient},
      {"steering", steering},
      {"fluency", fluency},
      {"potentials", potentials},
      {"heuristics", heuristics},
      {"beam", beam_contract},
      {"arithmetic", arithmetic},
      {"tokenizer", tokenizer},
      {"vr", [&] { return vr_harness(start); }},
  };

  std::size_t passed = 0, failed = 0, blocking = 0;
  for (const auto& [name, fn] : checks) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.status == Outcome::pass ? "PASS" : o.status == Outcome::skip ? "SKIP" : "FAIL";
    std::cout << tag << "  " << std::left << std::setw(11) << name << o.detail << "  [" << fmt(seconds_since(t0), 1)
              << " s]" << std::endl;
    if (o.status == Outcome::pass) ++passed;
    if (o.status == Outcome::fail) {
      ++failed;
      if (!allowed.count(name)) ++blocking;
    }
  }
  std::cout << passed << " passed, " << failed << " failed (" << (failed - blocking) << " allowed), total "
            << fmt(seconds_since(start), 1) << " s" << std::endl;
  return blocking == 0 ? 0 : 1;
}
