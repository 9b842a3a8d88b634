#pragma once

#include "cachesteer/cachesteer.hpp"

#include <cstdlib>
#include <filesystem>
#include <random>

#include <unistd.h>

namespace testing_support {

using namespace cachesteer;

inline const std::filesystem::path kFixtures = CACHESTEER_FIXTURES;
inline const std::filesystem::path kGpt2Dir = CACHESTEER_GPT2_DIR;
inline const std::filesystem::path kSourceDir = CACHESTEER_SOURCE_DIR;

struct Toy {
  Weights<float> weights = Weights<float>::load(kFixtures / "model.bin");
  Vocab vocab = Vocab::load(kFixtures / "vocab.json", kFixtures / "merges.txt");
  ToyScorer backend;
  CachedScorer scorer{backend};
  Engine<float> engine{weights, vocab, scorer};

  Embedding scene(const std::string& name) { return scorer.embed_image(kFixtures / "scenes" / (name + ".img")); }
};

/// Loaded once per test binary; the fixture files never change under a run.
inline Toy& toy() {
  static Toy t;
  return t;
}

/// Random GPT-2 block weights at any size, for shapes the fixture does not cover.
template <class T>
Weights<T> random_weights(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  auto vec = [&](std::size_t n, double s, double mean = 0.0) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(mean + s * n01(rng));
    return v;
  };
  const std::size_t d = c.d_model;
  Weights<T> w;
  w.config = c;
  w.wte = vec(c.vocab_size * d, scale);
  w.wpe = vec(c.max_positions * d, scale * 0.3);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    w.layers.push_back({vec(d, 0.1, 1.0), vec(d, 0.1), vec(d * 3 * d, scale), vec(3 * d, 0.1),
                        vec(d * d, scale), vec(d, 0.1), vec(d, 0.1, 1.0), vec(d, 0.1),
                        vec(d * 4 * d, scale), vec(4 * d, 0.1), vec(4 * d * d, scale), vec(d, 0.1)});
  }
  w.lnf_g = vec(d, 0.1, 1.0);
  w.lnf_b = vec(d, 0.1);
  return w;
}

/// Cache produced by running `ids` through the model one token at a time.
template <class T>
ContextCache<T> cache_for(std::span<const TokenId> ids, const Weights<T>& w) {
  ContextCache<T> c(w.config.n_layers, w.config.d_model);
  for (TokenId t : ids) c.append(forward_step(t, c, w).entries);
  return c;
}

/// Cache of all prompt tokens but the last, plus that last token: the state steering operates on.
template <class T>
std::pair<ContextCache<T>, TokenId> steering_state(std::string_view text, const Weights<T>& w, const Vocab& v) {
  const auto ids = v.encode(text).ids;
  const std::span<const TokenId> all(ids);
  return {cache_for<T>(all.first(ids.size() - 1), w), ids.back()};
}

inline const std::vector<std::string> kSceneWords{"cat", "dog", "man", "zebra", "cuba", "peru", "chad", "mali",
                                                 "togo", "fiji", "oslo", "lima", "rome", "ibm", "sony"};

/// A seeded steering problem: a prompt extended by a few random words, and a
/// target scene naming a random word.
struct Scenario {
  std::string prompt;
  std::string scene;
};

inline Scenario scenario(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> word(0, kSceneWords.size() - 1), extra(0, 3);
  Scenario s{"Image of a", ""};
  const auto n = extra(rng);
  for (std::size_t i = 0; i < n; ++i) s.prompt += (i % 2 ? " and a " : " ") + kSceneWords[word(rng)];
  s.scene = "Image of a " + kSceneWords[word(rng)];
  return s;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cachesteer_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline double kl(std::span<const float> p, std::span<const float> q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += p[i] * (std::log(static_cast<double>(p[i])) - std::log(static_cast<double>(q[i])));
  }
  return s;
}

}  // namespace testing_support
