#include "support.hpp"

#include <gtest/gtest.h>

using namespace cachesteer;
using testing_support::toy;

namespace {

// Independent full-sequence pre-LN GPT-2 forward in double: every position at
// once with a causal mask, no cache. Returns logits for each position.
std::vector<std::vector<double>> full_forward(const std::vector<TokenId>& toks, const Weights<float>& w) {
  const auto& c = w.config;
  const std::size_t n = toks.size(), d = c.d_model, H = c.n_heads, dh = c.d_head();
  using Mat = std::vector<std::vector<double>>;
  auto ln = [&](const std::vector<double>& x, const std::vector<float>& g, const std::vector<float>& b) {
    double mu = 0, var = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(d);
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
    return y;
  };
  auto matvec = [](const std::vector<double>& x, const std::vector<float>& W, const std::vector<float>& b) {
    const std::size_t out = b.size();
    std::vector<double> y(b.begin(), b.end());
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t o = 0; o < out; ++o) y[o] += x[i] * W[i * out + o];
    return y;
  };
  auto gelu = [](double x) {
    return 0.5 * x * (1 + std::tanh(std::sqrt(2 / std::acos(-1.0)) * (x + 0.044715 * x * x * x)));
  };
  Mat x(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k)
      x[i][k] = w.wte[static_cast<std::size_t>(toks[i]) * d + k] + w.wpe[i * d + k];
  for (const auto& L : w.layers) {
    Mat q(n), kk(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto qkv = matvec(ln(x[i], L.ln1_g, L.ln1_b), L.attn_w, L.attn_b);
      q[i].assign(qkv.begin(), qkv.begin() + d);
      kk[i].assign(qkv.begin() + d, qkv.begin() + 2 * d);
      v[i].assign(qkv.begin() + 2 * d, qkv.end());
    }
    Mat att_out(n, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * kk[j][h * dh + e];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& sj : s) z += (sj = std::exp(sj - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t e = 0; e < dh; ++e) att_out[i][h * dh + e] += s[j] / z * v[j][h * dh + e];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto o = matvec(att_out[i], L.proj_w, L.proj_b);
      for (std::size_t k = 0; k < d; ++k) x[i][k] += o[k];
      auto f = matvec(ln(x[i], L.ln2_g, L.ln2_b), L.fc_w, L.fc_b);
      for (auto& a : f) a = gelu(a);
      auto mo = matvec(f, L.mproj_w, L.mproj_b);
      for (std::size_t k = 0; k < d; ++k) x[i][k] += mo[k];
    }
  }
  Mat logits(n, std::vector<double>(c.vocab_size));
  for (std::size_t i = 0; i < n; ++i) {
    auto h = ln(x[i], w.lnf_g, w.lnf_b);
    for (std::size_t t = 0; t < c.vocab_size; ++t) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += h[k] * w.wte[t * d + k];
      logits[i][t] = s;
    }
  }
  return logits;
}

double max_rel_diff(std::span<const float> a, const std::vector<double>& b) {
  double scale = 0, diff = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / std::max(scale, 1e-12);
}

}  // namespace

TEST(ForwardStep, MatchesFullSequenceOracleOnEveryPrefix) {
  auto& t = toy();
  const auto ids = t.vocab.encode("Image of a zebra and a dog on the man").ids;
  const auto oracle = full_forward(ids, t.weights);
  ContextCache<float> cache(t.weights.config.n_layers, t.weights.config.d_model);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto out = forward_step(ids[i], cache, t.weights);
    EXPECT_LT(max_rel_diff(out.logits, oracle[i]), 1e-5) << "position " << i;
    cache.append(out.entries);
  }
}

TEST(ForwardStep, MatchesOracleOnRandomMultiHeadModel) {
  const ModelConfig c{3, 2, 8, 260, 16};
  const auto w = testing_support::random_weights<float>(c, 42);
  const std::vector<TokenId> ids{3, 200, 17, 17, 99, 259, 0};
  const auto oracle = full_forward(ids, w);
  ContextCache<float> cache(c.n_layers, c.d_model);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto out = forward_step(ids[i], cache, w);
    EXPECT_LT(max_rel_diff(out.logits, oracle[i]), 1e-5) << "position " << i;
    cache.append(out.entries);
  }
}

TEST(ForwardStep, DeterministicAndPure) {
  auto& t = toy();
  const auto ids = t.vocab.encode("Image of a cat").ids;
  const auto cache = testing_support::cache_for<float>(std::span(ids).first(3), t.weights);
  const auto before = cache;
  const auto sum = t.weights.checksum();
  const auto a = forward_step(ids[3], cache, t.weights);
  const auto b = forward_step(ids[3], cache, t.weights);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_TRUE(a.entries == b.entries);
  EXPECT_TRUE(cache == before);
  EXPECT_EQ(t.weights.checksum(), sum);
  EXPECT_EQ(a.entries.positions(), 1u);
  EXPECT_EQ(a.logits.size(), 321u);
}

TEST(ForwardStep, CacheEntriesAreCausal) {
  auto& t = toy();
  const auto ids = t.vocab.encode("Image of a cat and a dog").ids;
  const auto full = testing_support::cache_for<float>(ids, t.weights);
  for (std::size_t n = 1; n < ids.size(); ++n) {
    EXPECT_TRUE(full.prefix(n) == testing_support::cache_for<float>(std::span(ids).first(n), t.weights)) << n;
  }
}

TEST(ForwardStep, RejectsInvalidTokenAndFullCache) {
  auto& t = toy();
  ContextCache<float> empty(t.weights.config.n_layers, t.weights.config.d_model);
  EXPECT_THROW(forward_step(321, empty, t.weights), InputError);
  EXPECT_THROW(forward_step(-1, empty, t.weights), InputError);
  ContextCache<float> full(t.weights.config.n_layers, t.weights.config.d_model, t.weights.config.max_positions);
  EXPECT_THROW(forward_step(5, full, t.weights), InputError);
}

TEST(InitCache, OneTokenPromptHasOnePosition) {
  auto& t = toy();
  const std::vector<TokenId> p{t.vocab.encode("Image").ids[0]};
  const auto r = init_cache<float>(p, t.weights);
  EXPECT_EQ(r.cache.positions(), 1u);
  EXPECT_EQ(r.cache.n_layers(), 2u);
}

TEST(InitCache, EqualsIncrementalSteps) {
  auto& t = toy();
  const auto ids = t.vocab.encode("Image of a").ids;
  const auto r = init_cache<float>(ids, t.weights);
  ContextCache<float> c(t.weights.config.n_layers, t.weights.config.d_model);
  StepOutput<float> last;
  for (auto id : ids) {
    last = forward_step(id, c, t.weights);
    c.append(last.entries);
  }
  EXPECT_TRUE(r.cache == c);
  EXPECT_EQ(r.logits, last.logits);
}

TEST(InitCache, RejectsEmptyAndOverlongPrompts) {
  auto& t = toy();
  EXPECT_THROW(init_cache<float>(std::vector<TokenId>{}, t.weights), InputError);
  std::vector<TokenId> longp(t.weights.config.max_positions + 1, 5);
  EXPECT_THROW(init_cache<float>(longp, t.weights), InputError);
}

// One layer, one head, d_model = 4, with hand-set weights: zero queries make
// attention uniform, the value map is the identity and the MLP is off, so the
// residual stream after the block is e + LN(e) * (1 / (n + 1)) when the n
// cached values are zero. Everything below is evaluated by hand.
TEST(ForwardStep, HandEvaluatedSingleLayerWithZeroedValues) {
  const ModelConfig c{1, 1, 4, 3, 4};
  Weights<double> w;
  w.config = c;
  w.wte = {1, -1, 2, 0,  /**/ 0, 1, 0, 1, /**/ -1, 0, 0.5, 2};
  w.wpe.assign(16, 0.0);
  LayerWeights<double> L;
  L.ln1_g.assign(4, 1.0);
  L.ln1_b.assign(4, 0.0);
  L.attn_w.assign(4 * 12, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    L.attn_w[i * 12 + 4 + i] = 0.7;  // keys: irrelevant once queries are zero
    L.attn_w[i * 12 + 8 + i] = 1.0;  // values: identity
  }
  L.attn_b.assign(12, 0.0);
  L.proj_w.assign(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) L.proj_w[i * 4 + i] = 1.0;
  L.proj_b.assign(4, 0.0);
  L.ln2_g.assign(4, 1.0);
  L.ln2_b.assign(4, 0.0);
  L.fc_w.assign(4 * 16, 0.0);
  L.fc_b.assign(16, 0.0);
  L.mproj_w.assign(16 * 4, 0.0);
  L.mproj_b.assign(4, 0.0);
  w.layers.push_back(L);
  w.lnf_g.assign(4, 1.0);
  w.lnf_b.assign(4, 0.0);

  // Token 0 embeds to e = (1, -1, 2, 0): mean 0.5, variance 1.25.
  const double sd = std::sqrt(1.25 + 1e-5);
  const std::vector<double> ln_e{0.5 / sd, -1.5 / sd, 1.5 / sd, -0.5 / sd};
  auto expected_logits = [&](double share) {
    std::vector<double> x{1 + share * ln_e[0], -1 + share * ln_e[1], 2 + share * ln_e[2], 0 + share * ln_e[3]};
    const double mu = (x[0] + x[1] + x[2] + x[3]) / 4;
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu) / 4;
    std::vector<double> h(4), out(3, 0.0);
    for (int i = 0; i < 4; ++i) h[i] = (x[i] - mu) / std::sqrt(var + 1e-5);
    for (int t = 0; t < 3; ++t)
      for (int k = 0; k < 4; ++k) out[t] += h[k] * w.wte[t * 4 + k];
    return out;
  };

  ContextCache<double> none(1, 4);
  const auto alone = forward_step(0, none, w).logits;
  const auto want_alone = expected_logits(1.0);
  for (int t = 0; t < 3; ++t) EXPECT_NEAR(alone[t], want_alone[t], 1e-12);

  ContextCache<double> zeros(1, 4, 2);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 4; ++k) zeros.key(0, j)[k] = 3.0 * static_cast<double>(j) - static_cast<double>(k);
  const auto with = forward_step(0, zeros, w).logits;
  const auto want_with = expected_logits(1.0 / 3.0);
  for (int t = 0; t < 3; ++t) EXPECT_NEAR(with[t], want_with[t], 1e-12);
}

TEST(Softmax, AnalyticCases) {
  const auto u = softmax<double>(std::vector<double>{2, 2, 2, 2}, 0.37);
  for (double p : u) EXPECT_DOUBLE_EQ(p, 0.25);
  const auto p = softmax<double>(std::vector<double>{0, std::log(3.0)}, 1.0);
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Softmax, ColdLimitIsOneHot) {
  const auto p = softmax<double>(std::vector<double>{0.1, 0.3, 0.2}, 1e-6);
  EXPECT_NEAR(p[1], 1.0, 1e-9);
  EXPECT_NEAR(p[0], 0.0, 1e-9);
  EXPECT_NEAR(p[2], 0.0, 1e-9);
}

TEST(Softmax, NormalizedAndOrderPreserving) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> l(321);
    for (auto& x : l) x = n(rng);
    const auto p = softmax<float>(l, 0.5f + static_cast<float>(trial) * 0.1f);
    double s = 0;
    for (float v : p) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
    for (std::size_t i = 1; i < l.size(); ++i) {
      if (l[i] > l[i - 1]) {
        EXPECT_GE(p[i], p[i - 1]);
      }
    }
  }
}

TEST(Softmax, RejectsNonPositiveTemperature) {
  EXPECT_THROW(softmax<float>(std::vector<float>{1, 2}, 0.0f), InputError);
  EXPECT_THROW(softmax<float>(std::vector<float>{1, 2}, -1.0f), InputError);
}
