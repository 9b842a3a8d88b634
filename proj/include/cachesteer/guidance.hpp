#pragma once

/**
 * Image-guided steering of the context cache for one decoding step.
 *
 * For the step that feeds `token` against `cache`:
 *   1. the unmodified cache gives the reference distribution x_ref;
 *   2. the top_k tokens of x_ref become candidates, each scored by the
 *      similarity of (prefix + candidate) to the target embedding, and the
 *      clip potentials are softmax(similarity / tau_c) over candidates;
 *   3. the cache is moved by gd_steps normalized gradient-descent updates on
 *        L = CE(potentials, q restricted to candidates) + lambda * CE(x_ref, q)
 *      where q is the distribution under the modified cache. Gradients are
 *      L2-normalized separately per layer (keys and values of a layer
 *      together) and the update is C <- C - step * g_hat.
 *
 * step starts at alpha and is halved (up to max_backtracks times) while the
 * trial cache would increase L, so the objective never goes up between
 * iterations. Candidates and potentials are computed once per step.
 */

#include "cachesteer/cache_grad.hpp"
#include "cachesteer/scorer.hpp"
#include "cachesteer/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace cachesteer {

inline constexpr double kProbFloor = 1e-12;

struct GuidanceConfig {
  double lambda = 0.2;
  double tau_c = 0.01;
  double alpha = 0.3;
  std::size_t gd_steps = 5;
  std::size_t top_k = 512;
  double lm_temperature = 1.0;
  std::size_t max_backtracks = 8;

  void validate() const {
    if (!(tau_c > 0)) throw InputError("guidance: tau_c must be positive");
    if (top_k < 1) throw InputError("guidance: top_k must be at least 1");
    if (!(lm_temperature > 0)) throw InputError("guidance: lm_temperature must be positive");
    if (!std::isfinite(lambda) || !std::isfinite(alpha)) throw InputError("guidance: lambda/alpha must be finite");
  }
};

/// Frozen model, tokenizer and scorer shared by every decoding step.
template <class T>
struct Engine {
  const Weights<T>& weights;
  const Vocab& vocab;
  Scorer& scorer;
};

template <class T>
struct CandidateSet {
  std::vector<TokenId> ids;
  std::vector<std::string> sentences;
  std::vector<double> similarities;
  std::vector<T> potentials;
  std::vector<T> lm_probs;  // reference probabilities renormalized over the candidates
};

/// Indices of the k largest probabilities; ties go to the lower id.
template <class T>
std::vector<TokenId> top_k_tokens(std::span<const T> probs, std::size_t k) {
  std::vector<TokenId> ids(probs.size());
  std::iota(ids.begin(), ids.end(), 0);
  k = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](TokenId a, TokenId b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
  ids.resize(k);
  return ids;
}

/// softmax(similarity / tau) with a max shift.
template <class T>
std::vector<T> potentials_from_similarities(std::span<const double> sims, double tau) {
  if (sims.empty()) throw InputError("clip potentials: no candidates");
  if (!(tau > 0)) throw InputError("clip potentials: tau_c must be positive");
  const double best = *std::max_element(sims.begin(), sims.end());
  std::vector<double> e(sims.size());
  double sum = 0;
  for (std::size_t k = 0; k < sims.size(); ++k) {
    e[k] = std::exp((sims[k] - best) / tau);
    sum += e[k];
  }
  std::vector<T> p(sims.size());
  for (std::size_t k = 0; k < sims.size(); ++k) p[k] = static_cast<T>(e[k] / sum);
  return p;
}

/// Text of prefix + candidate. The end-of-text token contributes no text.
inline std::string candidate_sentence(std::span<const TokenId> prefix, TokenId candidate, const Vocab& vocab) {
  std::string s = vocab.decode(prefix);
  if (candidate != vocab.eot_id()) s += vocab.token_bytes(candidate);
  return s;
}

/// Clip potentials of candidate continuations of `prefix`; one scorer batch.
template <class T>
CandidateSet<T> clip_potentials(std::span<const TokenId> prefix, std::span<const TokenId> candidates,
                                const Embedding& target, Scorer& scorer, const Vocab& vocab, double tau) {
  if (candidates.empty()) throw InputError("clip potentials: no candidates");
  CandidateSet<T> cs;
  cs.ids.assign(candidates.begin(), candidates.end());
  for (TokenId c : candidates) cs.sentences.push_back(candidate_sentence(prefix, c, vocab));
  auto embs = scorer.embed_texts(cs.sentences);
  for (const auto& e : embs) cs.similarities.push_back(similarity(e, target));
  cs.potentials = potentials_from_similarities<T>(cs.similarities, tau);
  return cs;
}

template <class T>
struct LossGrad {
  double loss = 0;
  std::vector<T> grad;  // d loss / d probs, full vocabulary
  bool clamped = false;
};

/**
 * CE between the potentials and the steered distribution restricted to the
 * candidates and renormalized: -sum_k p_k log(q[x_k] / S), S = sum_k q[x_k].
 */
template <class T>
LossGrad<T> clip_loss_grad(std::span<const T> potentials, std::span<const T> steered,
                           std::span<const TokenId> candidates) {
  LossGrad<T> r;
  r.grad.assign(steered.size(), T(0));
  double mass = 0, psum = 0;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    mass += std::max(static_cast<double>(steered[candidates[k]]), kProbFloor);
    psum += potentials[k];
  }
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    double q = static_cast<double>(steered[candidates[k]]);
    if (q < kProbFloor) {
      q = kProbFloor;
      r.clamped = true;
    }
    const double p = potentials[k];
    r.loss -= p * std::log(q / mass);
    r.grad[candidates[k]] = static_cast<T>(-p / q + psum / mass);
  }
  return r;
}

/// CE(reference, steered) = -sum_v ref_v log q_v.
template <class T>
LossGrad<T> fluency_loss_grad(std::span<const T> steered, std::span<const T> reference) {
  LossGrad<T> r;
  r.grad.assign(steered.size(), T(0));
  for (std::size_t v = 0; v < steered.size(); ++v) {
    const double ref = reference[v];
    if (ref == 0) continue;
    double q = static_cast<double>(steered[v]);
    if (q < kProbFloor) {
      q = kProbFloor;
      r.clamped = true;
    }
    r.loss -= ref * std::log(q);
    r.grad[v] = static_cast<T>(-ref / q);
  }
  return r;
}

/// Scales each layer's (keys, values) gradient block to unit L2 norm; zero
/// blocks stay zero. Returns the pre-normalization norms.
template <class T>
std::vector<double> normalize_per_layer(CacheGrad<T>& g) {
  std::vector<double> norms;
  for (std::size_t l = 0; l < g.n_layers(); ++l) {
    auto& blk = g.layer(l);
    double s = 0;
    for (const auto* v : {&blk.keys, &blk.values}) {
      for (T x : *v) s += double(x) * double(x);
    }
    const double n = std::sqrt(s);
    norms.push_back(n);
    if (n == 0) continue;
    for (auto* v : {&blk.keys, &blk.values}) {
      for (T& x : *v) x = static_cast<T>(x / n);
    }
  }
  return norms;
}

struct IterationReport {
  std::size_t iteration = 0;
  double clip_loss = 0;
  double fluency_loss = 0;
  double total_loss = 0;
  std::vector<double> grad_norms;  // per layer, before normalization
  double step = 0;                 // accepted step length (0 when none was accepted)
  std::size_t backtracks = 0;
};

template <class T>
struct SteerResult {
  ContextCache<T> cache;  // steered context
  std::vector<T> reference_probs;
  std::vector<T> steered_probs;
  KVTensor<T> token_entries;  // the fed token's own key/value under the steered cache
  CandidateSet<T> candidates;
  std::vector<IterationReport> iterations;
  double clip_loss = 0;  // at the returned cache
  double fluency_loss = 0;
  double total_loss = 0;
  bool aborted = false;  // non-finite loss; original cache returned
  bool clamped = false;
};

namespace detail {

template <class T>
struct Evaluation {
  StepTape<T> tape;
  StepOutput<T> out;
  std::vector<T> probs;
  LossGrad<T> clip, fluency;
  double total = 0;
};

template <class T>
Evaluation<T> evaluate_objective(TokenId token, const ContextCache<T>& cache, const Weights<T>& w,
                                 const CandidateSet<T>& cs, std::span<const T> reference, const GuidanceConfig& cfg) {
  Evaluation<T> ev;
  ev.out = forward_step(token, cache, w, &ev.tape);
  ev.probs = softmax<T>(ev.out.logits, static_cast<T>(cfg.lm_temperature));
  ev.clip = clip_loss_grad<T>(cs.potentials, ev.probs, cs.ids);
  ev.fluency = fluency_loss_grad<T>(ev.probs, reference);
  ev.total = ev.clip.loss + cfg.lambda * ev.fluency.loss;
  return ev;
}

}  // namespace detail

/**
 * Steers `cache` (the context of `token`) toward `target`. `prefix` holds
 * every token so far including `token`; candidate sentences are
 * decode(prefix) + candidate, so they include the prompt.
 */
template <class T>
SteerResult<T> steer_cache(const ContextCache<T>& cache, TokenId token, const Embedding& target,
                           std::span<const TokenId> prefix, const GuidanceConfig& cfg, const Engine<T>& eng) {
  cfg.validate();
  const auto& w = eng.weights;
  const T temp = static_cast<T>(cfg.lm_temperature);

  SteerResult<T> r;
  auto base = forward_step(token, cache, w);
  r.reference_probs = softmax<T>(base.logits, temp);
  auto ids = top_k_tokens<T>(r.reference_probs, cfg.top_k);
  r.candidates = clip_potentials<T>(prefix, ids, target, eng.scorer, eng.vocab, cfg.tau_c);
  {
    double mass = 0;
    for (TokenId id : ids) mass += r.reference_probs[id];
    for (TokenId id : ids) r.candidates.lm_probs.push_back(static_cast<T>(r.reference_probs[id] / mass));
  }

  auto ev = detail::evaluate_objective<T>(token, cache, w, r.candidates, r.reference_probs, cfg);
  auto finish = [&](ContextCache<T> c, detail::Evaluation<T>& e) {
    r.cache = std::move(c);
    r.steered_probs = e.probs;
    r.token_entries = e.out.entries;
    r.clip_loss = e.clip.loss;
    r.fluency_loss = e.fluency.loss;
    r.total_loss = e.total;
    r.clamped = r.clamped || e.clip.clamped || e.fluency.clamped;
    return r;
  };
  if (!std::isfinite(ev.total)) {
    r.aborted = true;
    return finish(cache, ev);
  }
  if (cfg.gd_steps == 0 || cache.empty()) return finish(cache, ev);

  ContextCache<T> current = cache;
  for (std::size_t it = 0; it < cfg.gd_steps; ++it) {
    IterationReport rep;
    rep.iteration = it;
    rep.clip_loss = ev.clip.loss;
    rep.fluency_loss = ev.fluency.loss;
    rep.total_loss = ev.total;

    std::vector<T> dprobs(ev.probs.size());
    for (std::size_t v = 0; v < dprobs.size(); ++v) {
      dprobs[v] = ev.clip.grad[v] + static_cast<T>(cfg.lambda) * ev.fluency.grad[v];
    }
    auto dlogits = probs_to_logit_grad<T>(ev.probs, dprobs, temp);
    auto grad = backward_from_logits<T>(token, current, w, ev.tape, dlogits);
    rep.grad_norms = normalize_per_layer(grad);
    if (!grad.all_finite()) {
      r.aborted = true;
      r.iterations.push_back(rep);
      auto ev0 = detail::evaluate_objective<T>(token, cache, w, r.candidates, r.reference_probs, cfg);
      return finish(cache, ev0);
    }

    double step = cfg.alpha;
    bool accepted = false;
    for (std::size_t bt = 0; bt <= cfg.max_backtracks; ++bt, step *= 0.5) {
      ContextCache<T> trial = current;
      const T s = static_cast<T>(step);
      for (std::size_t l = 0; l < trial.n_layers(); ++l) {
        auto& dst = trial.layer(l);
        const auto& g = grad.layer(l);
        for (std::size_t i = 0; i < dst.keys.size(); ++i) dst.keys[i] -= s * g.keys[i];
        for (std::size_t i = 0; i < dst.values.size(); ++i) dst.values[i] -= s * g.values[i];
      }
      auto tev = detail::evaluate_objective<T>(token, trial, w, r.candidates, r.reference_probs, cfg);
      if (std::isfinite(tev.total) && tev.total <= ev.total) {
        current = std::move(trial);
        ev = std::move(tev);
        rep.step = step;
        accepted = true;
        break;
      }
      ++rep.backtracks;
    }
    r.iterations.push_back(rep);
    if (!accepted) break;
  }
  return finish(std::move(current), ev);
}

}  // namespace cachesteer
