#pragma once

/**
 * Single-token GPT-2 decoding against an explicit key/value context cache.
 *
 * forward_step() evaluates one token at position cache.positions(), attending
 * to every cached (K, V) pair plus its own. The input cache is never mutated;
 * the token's own key/value rows are returned so the caller decides whether to
 * commit them. That separation is what lets the steering loop evaluate a
 * modified cache without committing anything.
 */

#include "cachesteer/model.hpp"
#include "cachesteer/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

namespace cachesteer {

/// Per-layer key/value rows, row-major [positions, d_model]; heads are
/// contiguous d_head slices of each row.
template <class T>
struct LayerKV {
  std::vector<T> keys;
  std::vector<T> values;
  bool operator==(const LayerKV&) const = default;
};

template <class T>
class KVTensor {
 public:
  KVTensor() = default;
  KVTensor(std::size_t n_layers, std::size_t d_model, std::size_t positions = 0)
      : d_model_(d_model), positions_(positions), layers_(n_layers) {
    for (auto& l : layers_) {
      l.keys.assign(positions * d_model, T(0));
      l.values.assign(positions * d_model, T(0));
    }
  }

  std::size_t n_layers() const { return layers_.size(); }
  std::size_t d_model() const { return d_model_; }
  std::size_t positions() const { return positions_; }
  bool empty() const { return positions_ == 0; }

  LayerKV<T>& layer(std::size_t l) { return layers_[l]; }
  const LayerKV<T>& layer(std::size_t l) const { return layers_[l]; }

  std::span<T> key(std::size_t l, std::size_t j) { return {layers_[l].keys.data() + j * d_model_, d_model_}; }
  std::span<T> value(std::size_t l, std::size_t j) { return {layers_[l].values.data() + j * d_model_, d_model_}; }
  std::span<const T> key(std::size_t l, std::size_t j) const {
    return {layers_[l].keys.data() + j * d_model_, d_model_};
  }
  std::span<const T> value(std::size_t l, std::size_t j) const {
    return {layers_[l].values.data() + j * d_model_, d_model_};
  }

  /// Concatenates along the position axis.
  void append(const KVTensor& more) {
    if (layers_.empty()) {
      *this = more;
      return;
    }
    if (more.n_layers() != n_layers() || more.d_model() != d_model_) {
      throw InputError("cache append: shape mismatch");
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& dst = layers_[l];
      const auto& src = more.layers_[l];
      dst.keys.insert(dst.keys.end(), src.keys.begin(), src.keys.end());
      dst.values.insert(dst.values.end(), src.values.begin(), src.values.end());
    }
    positions_ += more.positions_;
  }

  /// The first n positions.
  KVTensor prefix(std::size_t n) const {
    KVTensor out(n_layers(), d_model_, n);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      std::copy_n(layers_[l].keys.begin(), n * d_model_, out.layers_[l].keys.begin());
      std::copy_n(layers_[l].values.begin(), n * d_model_, out.layers_[l].values.begin());
    }
    return out;
  }

  /// Total number of scalars (keys and values across all layers).
  std::size_t scalar_count() const { return 2 * layers_.size() * positions_ * d_model_; }

  /// Flat addressing used by gradient checks: layer-major, keys before values.
  T& flat(std::size_t idx) {
    const std::size_t per_layer = 2 * positions_ * d_model_;
    auto& l = layers_[idx / per_layer];
    idx %= per_layer;
    return idx < positions_ * d_model_ ? l.keys[idx] : l.values[idx - positions_ * d_model_];
  }
  T flat(std::size_t idx) const { return const_cast<KVTensor*>(this)->flat(idx); }

  bool all_finite() const {
    for (const auto& l : layers_) {
      for (const auto* v : {&l.keys, &l.values}) {
        for (T x : *v) {
          if (!std::isfinite(x)) return false;
        }
      }
    }
    return true;
  }

  bool operator==(const KVTensor&) const = default;

 private:
  std::size_t d_model_ = 0;
  std::size_t positions_ = 0;
  std::vector<LayerKV<T>> layers_;
};

template <class T>
using ContextCache = KVTensor<T>;

template <class T>
using LogitVector = std::vector<T>;

namespace detail {

template <class T>
struct LayerNormTape {
  std::vector<T> xhat;
  T rstd{};
};

template <class T>
void layer_norm(std::span<const T> x, const std::vector<T>& g, const std::vector<T>& b,
                std::span<T> y, LayerNormTape<T>* tape) {
  const std::size_t d = x.size();
  T mean = 0;
  for (T v : x) mean += v;
  mean /= static_cast<T>(d);
  T var = 0;
  for (T v : x) var += (v - mean) * (v - mean);
  var /= static_cast<T>(d);
  const T rstd = T(1) / std::sqrt(var + static_cast<T>(1e-5));
  if (tape) {
    tape->xhat.resize(d);
    tape->rstd = rstd;
  }
  for (std::size_t i = 0; i < d; ++i) {
    const T xh = (x[i] - mean) * rstd;
    if (tape) tape->xhat[i] = xh;
    y[i] = g[i] * xh + b[i];
  }
}

/// y[out] = bias + x[in] * W[in, out]
template <class T>
void linear(std::span<const T> x, const std::vector<T>& w, const std::vector<T>& bias, std::span<T> y) {
  const std::size_t n_in = x.size(), n_out = y.size();
  std::copy(bias.begin(), bias.end(), y.begin());
  for (std::size_t i = 0; i < n_in; ++i) {
    const T xi = x[i];
    const T* row = w.data() + i * n_out;
    for (std::size_t o = 0; o < n_out; ++o) y[o] += xi * row[o];
  }
}

template <class T>
T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T k = static_cast<T>(0.044715);
  const T u = c * (x + k * x * x * x);
  const T t = std::tanh(u);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
}

}  // namespace detail

/// Intermediate values of one forward_step, kept for the reverse pass.
template <class T>
struct StepTape {
  struct Layer {
    std::vector<T> x_in;
    detail::LayerNormTape<T> ln1;
    std::vector<T> q, k_self, v_self;
    std::vector<T> att;  // [heads, positions + 1]; last column is the token itself
    detail::LayerNormTape<T> ln2;
    std::vector<T> fc;  // pre-activation, [4d]
  };
  std::vector<Layer> layers;
  detail::LayerNormTape<T> lnf;
};

template <class T>
struct StepOutput {
  LogitVector<T> logits;
  KVTensor<T> entries;  // the token's own key/value, one position per layer
};

/// One decoding step. Pure: depends only on (token, cache, weights).
template <class T>
StepOutput<T> forward_step(TokenId token, const ContextCache<T>& cache, const Weights<T>& w,
                           StepTape<T>* tape = nullptr) {
  const auto& c = w.config;
  const std::size_t d = c.d_model, H = c.n_heads, dh = c.d_head(), n = cache.positions();
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
    throw InputError("forward_step: invalid token id " + std::to_string(token));
  }
  if (n >= c.max_positions) throw InputError("forward_step: context exceeds max_positions");
  if (!cache.empty() && (cache.n_layers() != c.n_layers || cache.d_model() != d)) {
    throw InputError("forward_step: cache shape does not match model");
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<T> x(d), a(d), qkv(3 * d), o(d), y(d), ff(4 * d), z(d);
  for (std::size_t i = 0; i < d; ++i) {
    x[i] = w.wte[static_cast<std::size_t>(token) * d + i] + w.wpe[n * d + i];
  }
  StepOutput<T> out{LogitVector<T>(c.vocab_size), KVTensor<T>(c.n_layers, d, 1)};
  if (tape) tape->layers.assign(c.n_layers, {});

  std::vector<T> scores(n + 1);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    auto* lt = tape ? &tape->layers[l] : nullptr;
    if (lt) lt->x_in = x;
    detail::layer_norm<T>(x, lw.ln1_g, lw.ln1_b, a, lt ? &lt->ln1 : nullptr);
    detail::linear<T>(a, lw.attn_w, lw.attn_b, qkv);
    const T* q = qkv.data();
    const T* k_self = qkv.data() + d;
    const T* v_self = qkv.data() + 2 * d;
    std::copy(k_self, k_self + d, out.entries.key(l, 0).begin());
    std::copy(v_self, v_self + d, out.entries.value(l, 0).begin());
    if (lt) {
      lt->q.assign(q, q + d);
      lt->k_self.assign(k_self, k_self + d);
      lt->v_self.assign(v_self, v_self + d);
      lt->att.resize(H * (n + 1));
    }

    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      T best = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= n; ++j) {
        const T* k = j < n ? cache.key(l, j).data() + off : k_self + off;
        T s = 0;
        for (std::size_t e = 0; e < dh; ++e) s += q[off + e] * k[e];
        scores[j] = s * scale;
        best = std::max(best, scores[j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j <= n; ++j) {
        scores[j] = std::exp(scores[j] - best);
        sum += scores[j];
      }
      for (std::size_t e = 0; e < dh; ++e) o[off + e] = 0;
      for (std::size_t j = 0; j <= n; ++j) {
        const T p = scores[j] / sum;
        if (lt) lt->att[h * (n + 1) + j] = p;
        const T* v = j < n ? cache.value(l, j).data() + off : v_self + off;
        for (std::size_t e = 0; e < dh; ++e) o[off + e] += p * v[e];
      }
    }
    detail::linear<T>(o, lw.proj_w, lw.proj_b, y);
    for (std::size_t i = 0; i < d; ++i) x[i] += y[i];

    detail::layer_norm<T>(x, lw.ln2_g, lw.ln2_b, a, lt ? &lt->ln2 : nullptr);
    detail::linear<T>(a, lw.fc_w, lw.fc_b, ff);
    if (lt) lt->fc = ff;
    for (auto& v : ff) v = detail::gelu(v);
    detail::linear<T>(ff, lw.mproj_w, lw.mproj_b, z);
    for (std::size_t i = 0; i < d; ++i) x[i] += z[i];
  }

  detail::layer_norm<T>(x, w.lnf_g, w.lnf_b, a, tape ? &tape->lnf : nullptr);
  for (std::size_t v = 0; v < c.vocab_size; ++v) {
    const T* row = w.wte.data() + v * d;
    T s = 0;
    for (std::size_t i = 0; i < d; ++i) s += a[i] * row[i];
    out.logits[v] = s;
  }
  return out;
}

template <class T>
struct InitResult {
  ContextCache<T> cache;
  LogitVector<T> logits;
};

/// Consumes a prompt token by token. The cache holds one entry per prompt
/// token; the logits condition the first generated token.
template <class T>
InitResult<T> init_cache(std::span<const TokenId> prompt, const Weights<T>& w) {
  if (prompt.empty()) throw InputError("init_cache: empty prompt");
  if (prompt.size() > w.config.max_positions) throw InputError("init_cache: prompt exceeds max_positions");
  InitResult<T> r{ContextCache<T>(w.config.n_layers, w.config.d_model), {}};
  for (TokenId t : prompt) {
    auto step = forward_step(t, r.cache, w);
    r.cache.append(step.entries);
    r.logits = std::move(step.logits);
  }
  return r;
}

/// Temperature softmax with a max shift.
template <class T>
std::vector<T> softmax(std::span<const T> logits, T temperature = T(1)) {
  if (!(temperature > T(0))) throw InputError("softmax: temperature must be positive");
  std::vector<T> p(logits.size());
  if (logits.empty()) return p;
  const T best = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - best) / temperature);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

template <class T>
std::vector<T> softmax(const std::vector<T>& logits, T temperature = T(1)) {
  return softmax(std::span<const T>(logits), temperature);
}

}  // namespace cachesteer
