#pragma once

// Guided generation loop: greedy and beam search over steered distributions.

#include "cachesteer/guidance.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cachesteer {

inline constexpr std::string_view kCaptionPrompt = "Image of a";
inline constexpr std::string_view kOcrPrompt = "Image of text that says";

struct DecodeConfig {
  std::string prompt{kCaptionPrompt};
  std::size_t max_tokens = 15;
  std::size_t beams = 5;
  double f_e = 1.04;  // end-token factor, compounded per step from t_e on
  std::size_t t_e = 3;
  std::size_t repetition_window = 4;
  double repetition_factor = 2.0;
  std::optional<double> capital_penalty;
  std::uint64_t seed = 0;

  void validate() const {
    if (beams < 1) throw InputError("decode: beams must be at least 1");
    if (!(f_e >= 1)) throw InputError("decode: f_e must be >= 1");
    if (!(repetition_factor > 1)) throw InputError("decode: repetition_factor must be > 1");
    if (capital_penalty && !(*capital_penalty >= 0)) throw InputError("decode: capital_penalty must be >= 0");
  }

  static DecodeConfig captioning() { return {}; }
  static DecodeConfig arithmetic() {
    DecodeConfig c;
    c.f_e = 1.06;
    c.t_e = 1;
    return c;
  }
};

/**
 * Token-selection heuristics on a normalized distribution. `generated` holds
 * only the tokens produced after the prompt; `step` is the index of the token
 * about to be generated (0 for the first).
 */
template <class T>
std::vector<T> apply_heuristics(std::span<const T> probs, std::span<const TokenId> generated, std::size_t step,
                                const DecodeConfig& cfg, const Vocab& vocab) {
  std::vector<double> p(probs.begin(), probs.end());
  if (cfg.repetition_window > 0) {
    const std::size_t from = generated.size() > cfg.repetition_window ? generated.size() - cfg.repetition_window : 0;
    std::set<TokenId> recent(generated.begin() + static_cast<std::ptrdiff_t>(from), generated.end());
    for (TokenId t : recent) p[static_cast<std::size_t>(t)] /= cfg.repetition_factor;
  }
  if (step + 1 > cfg.t_e) {
    p[static_cast<std::size_t>(vocab.eot_id())] *= std::pow(cfg.f_e, static_cast<double>(step + 1 - cfg.t_e));
  }
  if (cfg.capital_penalty) {
    for (std::size_t v = 0; v < p.size(); ++v) {
      if (vocab.starts_capitalized(static_cast<TokenId>(v))) p[v] *= *cfg.capital_penalty;
    }
  }
  double sum = 0;
  for (double x : p) sum += x;
  std::vector<T> out(p.size());
  for (std::size_t v = 0; v < p.size(); ++v) out[v] = static_cast<T>(p[v] / sum);
  return out;
}

template <class T>
struct BeamState {
  std::vector<TokenId> tokens;     // prompt + generated
  std::size_t prompt_len = 0;
  ContextCache<T> cache;           // steered context of tokens.back(): tokens.size() - 1 positions
  double cum_log_prob = 0;
  double clip_loss_sum = 0;
  std::size_t steps = 0;
  bool finished = false;

  std::span<const TokenId> generated() const {
    return std::span(tokens).subspan(prompt_len);
  }
  double mean_clip_loss() const { return steps ? clip_loss_sum / static_cast<double>(steps) : 0.0; }
  double score() const { return steps ? cum_log_prob / static_cast<double>(steps) : 0.0; }
};

/// Called once per expanded beam per step with a JSON record.
using TraceSink = std::function<void(const nlohmann::json&)>;

struct GenerationResult {
  std::string caption;
  std::vector<TokenId> tokens;  // generated ids, end-of-text excluded
  double mean_clip_loss = 0;
  double cum_log_prob = 0;
};

struct BeamSearchResult {
  GenerationResult best;
  std::vector<GenerationResult> beams;  // every finished beam
};

namespace detail {

template <class T>
struct Expansion {
  SteerResult<T> steer;
  std::vector<T> probs;  // after heuristics
};

template <class T>
BeamState<T> initial_beam(const std::string& prompt, const Engine<T>& eng) {
  auto ids = eng.vocab.encode(prompt).ids;
  if (ids.empty()) throw InputError("prompt tokenizes to nothing");
  BeamState<T> b;
  b.tokens = ids;
  b.prompt_len = ids.size();
  const auto& c = eng.weights.config;
  b.cache = ContextCache<T>(c.n_layers, c.d_model);
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) b.cache.append(forward_step(ids[i], b.cache, eng.weights).entries);
  return b;
}

template <class T>
Expansion<T> expand(const BeamState<T>& b, const Embedding& target, const GuidanceConfig& g, const DecodeConfig& d,
                    const Engine<T>& eng) {
  Expansion<T> e;
  e.steer = steer_cache<T>(b.cache, b.tokens.back(), target, b.tokens, g, eng);
  e.probs = apply_heuristics<T>(e.steer.steered_probs, b.generated(), b.steps, d, eng.vocab);
  return e;
}

template <class T>
BeamState<T> extend(const BeamState<T>& b, const Expansion<T>& e, TokenId next, const Vocab& vocab) {
  BeamState<T> c;
  c.tokens = b.tokens;
  c.tokens.push_back(next);
  c.prompt_len = b.prompt_len;
  c.cache = e.steer.cache;
  c.cache.append(e.steer.token_entries);
  c.cum_log_prob = b.cum_log_prob + std::log(static_cast<double>(e.probs[static_cast<std::size_t>(next)]));
  c.clip_loss_sum = b.clip_loss_sum + e.steer.clip_loss;
  c.steps = b.steps + 1;
  c.finished = next == vocab.eot_id();
  return c;
}

template <class T>
TokenId argmax(std::span<const T> p) {
  return static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
}

template <class T>
GenerationResult finalize(const BeamState<T>& b, const Vocab& vocab) {
  GenerationResult r;
  for (TokenId t : b.generated()) {
    if (t != vocab.eot_id()) r.tokens.push_back(t);
  }
  std::string text = vocab.decode(r.tokens);
  const auto first = text.find_first_not_of(" \t\r\n");
  const auto last = text.find_last_not_of(" \t\r\n");
  r.caption = first == std::string::npos ? "" : text.substr(first, last - first + 1);
  r.mean_clip_loss = b.mean_clip_loss();
  r.cum_log_prob = b.cum_log_prob;
  return r;
}

template <class T>
nlohmann::json trace_record(std::size_t step, std::size_t beam, const Expansion<T>& e, TokenId chosen,
                            const Vocab& vocab) {
  nlohmann::json top = nlohmann::json::array();
  const auto& cs = e.steer.candidates;
  std::vector<std::size_t> order(cs.ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return cs.potentials[a] > cs.potentials[b]; });
  for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i) {
    const auto k = order[i];
    const auto id = cs.ids[k];
    top.push_back({{"token", id},
                   {"text", vocab.token_bytes(id)},
                   {"potential", cs.potentials[k]},
                   {"prob", e.probs[static_cast<std::size_t>(id)]}});
  }
  nlohmann::json iters = nlohmann::json::array();
  for (const auto& it : e.steer.iterations) {
    iters.push_back({{"clip_loss", it.clip_loss},
                     {"fluency_loss", it.fluency_loss},
                     {"total_loss", it.total_loss},
                     {"grad_norms", it.grad_norms},
                     {"step", it.step}});
  }
  return {{"step", step},
          {"beam", beam},
          {"token", chosen},
          {"text", chosen >= 0 ? vocab.token_bytes(chosen) : ""},
          {"top", top},
          {"clip_loss", e.steer.clip_loss},
          {"fluency_loss", e.steer.fluency_loss},
          {"aborted", e.steer.aborted},
          {"iterations", iters}};
}

}  // namespace detail

/// Steer, apply heuristics, take the argmax; until end-of-text or max_tokens.
template <class T>
GenerationResult generate_greedy(const Embedding& target, const GuidanceConfig& g, const DecodeConfig& d,
                                 const Engine<T>& eng, const TraceSink& trace = {}) {
  d.validate();
  auto beam = detail::initial_beam<T>(d.prompt, eng);
  while (!beam.finished && beam.steps < d.max_tokens) {
    auto e = detail::expand<T>(beam, target, g, d, eng);
    const TokenId next = detail::argmax<T>(e.probs);
    if (trace) trace(detail::trace_record<T>(beam.steps, 0, e, next, eng.vocab));
    beam = detail::extend<T>(beam, e, next, eng.vocab);
  }
  return detail::finalize(beam, eng.vocab);
}

/**
 * Beam search. Each step every live beam is steered along its own history;
 * the `beams` best continuations overall (length-normalized log-probability
 * of the heuristic-adjusted distributions) survive. Beams that emit
 * end-of-text are set aside as finished; beams still live at max_tokens are
 * finished there. The reported beam has the lowest mean per-step CLIP loss.
 */
template <class T>
BeamSearchResult generate_beam(const Embedding& target, const GuidanceConfig& g, const DecodeConfig& d,
                               const Engine<T>& eng, const TraceSink& trace = {}) {
  d.validate();
  std::vector<BeamState<T>> live{detail::initial_beam<T>(d.prompt, eng)};
  std::vector<BeamState<T>> finished;
  for (std::size_t step = 0; step < d.max_tokens && !live.empty(); ++step) {
    struct Candidate {
      std::size_t beam;
      TokenId token;
      double score;
    };
    std::vector<detail::Expansion<T>> exps;
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      exps.push_back(detail::expand<T>(live[b], target, g, d, eng));
      const auto& probs = exps.back().probs;
      for (TokenId t : top_k_tokens<T>(probs, d.beams)) {
        const double p = probs[static_cast<std::size_t>(t)];
        if (!(p > 0)) continue;
        cands.push_back({b, t, (live[b].cum_log_prob + std::log(p)) / static_cast<double>(step + 1)});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.token < b.token;
    });
    cands.resize(std::min(cands.size(), d.beams));
    std::vector<BeamState<T>> next;
    for (const auto& c : cands) {
      if (trace) trace(detail::trace_record<T>(step, c.beam, exps[c.beam], c.token, eng.vocab));
      auto child = detail::extend<T>(live[c.beam], exps[c.beam], c.token, eng.vocab);
      (child.finished ? finished : next).push_back(std::move(child));
    }
    live = std::move(next);
  }
  for (auto& b : live) finished.push_back(std::move(b));

  BeamSearchResult res;
  if (finished.empty()) {
    res.best = detail::finalize(detail::initial_beam<T>(d.prompt, eng), eng.vocab);
    return res;
  }
  std::size_t best = 0;
  for (std::size_t i = 0; i < finished.size(); ++i) {
    res.beams.push_back(detail::finalize(finished[i], eng.vocab));
    const auto& a = finished[i];
    const auto& cur = finished[best];
    if (a.mean_clip_loss() < cur.mean_clip_loss() ||
        (a.mean_clip_loss() == cur.mean_clip_loss() && a.score() > cur.score())) {
      best = i;
    }
  }
  res.best = res.beams[best];
  return res;
}

}  // namespace cachesteer
