#pragma once

// Reverse-mode gradient of a probability-space loss with respect to every
// cached key and value, through exactly one forward_step.

#include "cachesteer/lm.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace cachesteer {

template <class T>
using CacheGrad = KVTensor<T>;

namespace detail {

template <class T>
void layer_norm_backward(const LayerNormTape<T>& t, const std::vector<T>& g, std::span<const T> dy,
                         std::span<T> dx_accum) {
  const std::size_t d = dy.size();
  T mean_dxh = 0, mean_dxh_xh = 0;
  std::vector<T> dxh(d);
  for (std::size_t i = 0; i < d; ++i) {
    dxh[i] = dy[i] * g[i];
    mean_dxh += dxh[i];
    mean_dxh_xh += dxh[i] * t.xhat[i];
  }
  mean_dxh /= static_cast<T>(d);
  mean_dxh_xh /= static_cast<T>(d);
  for (std::size_t i = 0; i < d; ++i) {
    dx_accum[i] += t.rstd * (dxh[i] - mean_dxh - t.xhat[i] * mean_dxh_xh);
  }
}

/// dx[in] = sum_o dy[o] * W[in, o]
template <class T>
void linear_backward_input(std::span<const T> dy, const std::vector<T>& w, std::span<T> dx) {
  const std::size_t n_in = dx.size(), n_out = dy.size();
  for (std::size_t i = 0; i < n_in; ++i) {
    const T* row = w.data() + i * n_out;
    T s = 0;
    for (std::size_t o = 0; o < n_out; ++o) s += dy[o] * row[o];
    dx[i] = s;
  }
}

}  // namespace detail

/// Gradient w.r.t. the post-softmax logits given dLoss/dprobs.
template <class T>
std::vector<T> probs_to_logit_grad(std::span<const T> probs, std::span<const T> loss_grad, T temperature) {
  T dot = 0;
  for (std::size_t v = 0; v < probs.size(); ++v) dot += loss_grad[v] * probs[v];
  std::vector<T> g(probs.size());
  for (std::size_t v = 0; v < probs.size(); ++v) g[v] = probs[v] * (loss_grad[v] - dot) / temperature;
  return g;
}

/// Reverse pass given a filled tape and dLoss/dlogits.
template <class T>
CacheGrad<T> backward_from_logits(TokenId token, const ContextCache<T>& cache, const Weights<T>& w,
                                  const StepTape<T>& tape, std::span<const T> dlogits) {
  (void)token;
  const auto& c = w.config;
  const std::size_t d = c.d_model, H = c.n_heads, dh = c.d_head(), n = cache.positions(), ff = c.d_ff();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  CacheGrad<T> grad(c.n_layers, d, n);

  // logits[v] = lnf_out . wte[v]
  std::vector<T> dlnf(d, T(0));
  for (std::size_t v = 0; v < c.vocab_size; ++v) {
    const T gv = dlogits[v];
    if (gv == T(0)) continue;
    const T* row = w.wte.data() + v * d;
    for (std::size_t i = 0; i < d; ++i) dlnf[i] += gv * row[i];
  }
  std::vector<T> dx(d, T(0));
  detail::layer_norm_backward<T>(tape.lnf, w.lnf_g, dlnf, dx);

  std::vector<T> dg(ff), dm(d), dqkv(3 * d), da(d), dout(d);
  std::vector<T> datt(n + 1), dscore(n + 1);
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    const auto& lt = tape.layers[li];

    // MLP block: x_out = x_mid + mproj(gelu(fc(ln2(x_mid))))
    detail::linear_backward_input<T>(dx, lw.mproj_w, dg);
    for (std::size_t k = 0; k < ff; ++k) dg[k] *= detail::gelu_grad(lt.fc[k]);
    detail::linear_backward_input<T>(dg, lw.fc_w, dm);
    detail::layer_norm_backward<T>(lt.ln2, lw.ln2_g, dm, dx);  // dx is now d x_mid

    // Attention block: x_mid = x_in + proj(attn(ln1(x_in)))
    detail::linear_backward_input<T>(dx, lw.proj_w, dout);
    std::fill(dqkv.begin(), dqkv.end(), T(0));
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      const T* att = lt.att.data() + h * (n + 1);
      T weighted = 0;
      for (std::size_t j = 0; j <= n; ++j) {
        const T* v = j < n ? cache.value(li, j).data() + off : lt.v_self.data() + off;
        T s = 0;
        for (std::size_t e = 0; e < dh; ++e) s += dout[off + e] * v[e];
        datt[j] = s;
        weighted += att[j] * s;
        T* dv = j < n ? grad.value(li, j).data() + off : dqkv.data() + 2 * d + off;
        for (std::size_t e = 0; e < dh; ++e) dv[e] += att[j] * dout[off + e];
      }
      for (std::size_t j = 0; j <= n; ++j) dscore[j] = att[j] * (datt[j] - weighted) * scale;
      for (std::size_t j = 0; j <= n; ++j) {
        const T* k = j < n ? cache.key(li, j).data() + off : lt.k_self.data() + off;
        T* dk = j < n ? grad.key(li, j).data() + off : dqkv.data() + d + off;
        for (std::size_t e = 0; e < dh; ++e) {
          dqkv[off + e] += dscore[j] * k[e];
          dk[e] += dscore[j] * lt.q[off + e];
        }
      }
    }
    detail::linear_backward_input<T>(dqkv, lw.attn_w, da);
    detail::layer_norm_backward<T>(lt.ln1, lw.ln1_g, da, dx);  // dx is now d x_in
  }
  return grad;
}

/**
 * dLoss/dCache for a loss defined on softmax(logits / temperature) of the
 * step that feeds `token` against `cache`. `loss_grad` is dLoss/dprobs and
 * must have vocab_size entries.
 */
template <class T>
CacheGrad<T> grad_wrt_cache(TokenId token, const ContextCache<T>& cache, const Weights<T>& w,
                            std::span<const T> loss_grad, T temperature = T(1)) {
  const auto& c = w.config;
  if (loss_grad.size() != c.vocab_size) throw InputError("grad_wrt_cache: loss_grad has wrong length");
  StepTape<T> tape;
  auto fwd = forward_step(token, cache, w, &tape);
  auto probs = softmax<T>(fwd.logits, temperature);
  auto dlogits = probs_to_logit_grad<T>(probs, loss_grad, temperature);
  return backward_from_logits<T>(token, cache, w, tape, dlogits);
}

/// Scalar loss over the next-token distribution together with its gradient.
template <class T>
struct ProbLoss {
  std::function<T(std::span<const T>)> value;
  std::function<std::vector<T>(std::span<const T>)> grad;
};

/// Linear probe loss <g, p>; its gradient is g itself.
template <class T>
ProbLoss<T> linear_prob_loss(std::vector<T> g) {
  return {[g](std::span<const T> p) {
            T s = 0;
            for (std::size_t i = 0; i < p.size(); ++i) s += g[i] * p[i];
            return s;
          },
          [g](std::span<const T>) { return g; }};
}

struct GradCheckReport {
  double max_rel_err = 0;
  std::size_t coords_checked = 0;
  std::size_t worst_coord = 0;
};

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// gradient is numerically zero from dominating the report.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/**
 * Compares grad_wrt_cache with central finite differences of `loss` on a
 * deterministic sample of at most `max_coords` cache coordinates (all of
 * them when the cache is smaller). The fourth-order stencil
 *   (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h
 * keeps truncation error below roundoff at h = 1e-3, where the two-point
 * stencil cannot resolve coordinates many orders smaller than the largest.
 */
template <class T>
GradCheckReport finite_difference_check(TokenId token, const ContextCache<T>& cache, const Weights<T>& w,
                                        const ProbLoss<T>& loss, double epsilon, std::size_t max_coords = 500,
                                        std::uint64_t seed = 0, T temperature = T(1)) {
  if (!(epsilon > 0)) throw InputError("finite_difference_check: epsilon must be positive");
  auto eval = [&](const ContextCache<T>& cc) {
    auto p = softmax<T>(forward_step(token, cc, w).logits, temperature);
    return static_cast<double>(loss.value(p));
  };
  auto p0 = softmax<T>(forward_step(token, cache, w).logits, temperature);
  auto lg = loss.grad(p0);
  auto analytic = grad_wrt_cache<T>(token, cache, w, lg, temperature);

  const std::size_t total = cache.scalar_count();
  std::vector<std::size_t> coords;
  if (total <= max_coords) {
    for (std::size_t i = 0; i < total; ++i) coords.push_back(i);
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    for (std::size_t i = 0; i < max_coords; ++i) coords.push_back(pick(rng));
  }

  GradCheckReport rep;
  ContextCache<T> probe = cache;
  for (std::size_t idx : coords) {
    const T orig = probe.flat(idx);
    auto at = [&](double h) {
      probe.flat(idx) = orig + static_cast<T>(h);
      const double v = eval(probe);
      probe.flat(idx) = orig;
      return v;
    };
    const double numeric =
        (8 * (at(epsilon) - at(-epsilon)) - (at(2 * epsilon) - at(-2 * epsilon))) / (12 * epsilon);
    const double err = relative_error(static_cast<double>(analytic.flat(idx)), numeric);
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst_coord = idx;
    }
    ++rep.coords_checked;
  }
  return rep;
}

}  // namespace cachesteer
