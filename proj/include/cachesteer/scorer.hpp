#pragma once

/**
 * Contrastive text/image embedding interface.
 *
 * similarity() is cosine similarity: higher means better matched. Text and
 * image embeddings handed to callers are unit-norm; derived embeddings
 * (arithmetic results) keep their raw scale.
 *
 * Backends:
 *   ToyScorer      deterministic byte-trigram hashing; "images" are files
 *                  whose bytes describe a scene in words
 *   RemoteScorer   newline-delimited JSON client (see remote_scorer.hpp)
 *   CachedScorer   decorator adding an in-memory + on-disk embedding cache
 */

#include "cachesteer/common.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cachesteer {

enum class Modality { text, image, derived };

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::derived: return "derived";
  }
  return "?";
}

struct Embedding {
  std::vector<float> values;
  Modality modality = Modality::text;
  double raw_norm = 1.0;  // norm before any normalization

  std::size_t dim() const { return values.size(); }
};

inline double l2_norm(std::span<const float> v) {
  double s = 0;
  for (float x : v) s += double(x) * double(x);
  return std::sqrt(s);
}

/// Scales to unit norm in place and records the original norm.
inline void normalize(Embedding& e) {
  const double n = l2_norm(e.values);
  if (!(n > 0) || !std::isfinite(n)) throw BackendError("embedding has zero or non-finite norm");
  for (auto& x : e.values) x = static_cast<float>(x / n);
  e.raw_norm = n;
}

/// Cosine similarity in [-1, 1].
inline double similarity(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim()) throw InputError("similarity: dimension mismatch");
  const double na = l2_norm(a.values), nb = l2_norm(b.values);
  if (!(na > 0) || !(nb > 0)) throw DomainError("similarity: zero-norm operand");
  double dot = 0;
  for (std::size_t i = 0; i < a.dim(); ++i) dot += double(a.values[i]) * double(b.values[i]);
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

inline void warn(const std::string& msg) { std::cerr << "[cachesteer] warning: " << msg << '\n'; }

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read image file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Scorer {
 public:
  virtual ~Scorer() = default;

  virtual std::size_t dim() const = 0;
  /// Identifies backend + parameters; part of every embedding-cache key.
  virtual std::string backend_id() const = 0;
  /// One backend request per call. Results are unit-norm and order-preserving.
  virtual std::vector<Embedding> embed_texts(std::span<const std::string> texts) = 0;
  /// Same contract; items are raw image file contents.
  virtual std::vector<Embedding> embed_images(std::span<const std::string> images) = 0;

  Embedding embed_text(const std::string& text) { return embed_texts(std::span(&text, 1)).front(); }
  Embedding embed_image_bytes(const std::string& bytes) { return embed_images(std::span(&bytes, 1)).front(); }
  Embedding embed_image(const std::filesystem::path& path) { return embed_image_bytes(read_file_bytes(path)); }

  /// Number of requests that reached the backend.
  std::size_t requests() const { return requests_.load(); }

 protected:
  void count_request() { ++requests_; }

 private:
  std::atomic<std::size_t> requests_{0};
};

/**
 * Byte 3-gram counts of " " + text + " ", hashed into `dim` buckets with a
 * seeded universal hash ((a*x + b) mod (2^61 - 1)) mod dim, then unit-normalized.
 * Shared substrings produce similarity, with no pretrained model involved.
 */
class ToyScorer final : public Scorer {
 public:
  explicit ToyScorer(std::uint64_t seed = 0, std::size_t dim = 64) : seed_(seed), dim_(dim) {
    if (dim == 0) throw InputError("toy scorer: d_emb must be positive");
    std::mt19937_64 rng(seed);
    a_ = rng() % (kPrime - 1) + 1;
    b_ = rng() % kPrime;
  }

  std::size_t dim() const override { return dim_; }
  std::string backend_id() const override {
    return "toy:" + std::to_string(seed_) + ":" + std::to_string(dim_);
  }

  std::vector<Embedding> embed_texts(std::span<const std::string> texts) override {
    count_request();
    std::vector<Embedding> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed(t, Modality::text));
    return out;
  }

  std::vector<Embedding> embed_images(std::span<const std::string> images) override {
    count_request();
    std::vector<Embedding> out;
    out.reserve(images.size());
    for (const auto& bytes : images) out.push_back(embed(bytes, Modality::image));
    return out;
  }

 private:
  static constexpr std::uint64_t kPrime = (1ULL << 61) - 1;

  std::size_t bucket(std::uint32_t trigram) const {
    const unsigned __int128 v = static_cast<unsigned __int128>(a_) * trigram + b_;
    return static_cast<std::size_t>(static_cast<std::uint64_t>(v % kPrime) % dim_);
  }

  Embedding embed(const std::string& text, Modality m) const {
    if (text.empty()) throw InputError("cannot embed empty text");
    const std::string padded = " " + text + " ";
    Embedding e{std::vector<float>(dim_, 0.0f), m, 1.0};
    for (std::size_t i = 0; i + 2 < padded.size(); ++i) {
      const std::uint32_t g = (std::uint32_t(static_cast<unsigned char>(padded[i])) << 16) |
                              (std::uint32_t(static_cast<unsigned char>(padded[i + 1])) << 8) |
                              std::uint32_t(static_cast<unsigned char>(padded[i + 2]));
      e.values[bucket(g)] += 1.0f;
    }
    normalize(e);
    return e;
  }

  std::uint64_t seed_;
  std::size_t dim_;
  std::uint64_t a_ = 1, b_ = 0;
};

/**
 * Memoizes another scorer by content hash. With a path, records are appended
 * to a binary file ([u64 key][u32 dim][u8 modality][dim x f32]) with a JSON
 * index sidecar at path + ".index.json". A file that fails validation is
 * discarded with a warning and rebuilt from backend answers.
 */
class CachedScorer final : public Scorer {
 public:
  explicit CachedScorer(Scorer& inner, std::filesystem::path path = {})
      : inner_(inner), path_(std::move(path)) {
    if (!path_.empty()) load();
  }

  std::size_t dim() const override { return inner_.dim(); }
  std::string backend_id() const override { return inner_.backend_id(); }

  std::vector<Embedding> embed_texts(std::span<const std::string> texts) override {
    return lookup("embed_text", texts, [this](std::span<const std::string> miss) { return inner_.embed_texts(miss); });
  }
  std::vector<Embedding> embed_images(std::span<const std::string> images) override {
    return lookup("embed_image", images,
                  [this](std::span<const std::string> miss) { return inner_.embed_images(miss); });
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

  std::uint64_t key(const std::string& op, const std::string& payload) const {
    std::uint64_t h = fnv1a(inner_.backend_id());
    h = fnv1a(std::string_view("\0", 1), h);
    h = fnv1a(op, h);
    h = fnv1a(std::string_view("\0", 1), h);
    return fnv1a(payload, h);
  }

 private:
  template <class Fetch>
  std::vector<Embedding> lookup(const std::string& op, std::span<const std::string> items, Fetch fetch) {
    std::vector<Embedding> out(items.size());
    std::vector<std::size_t> miss_idx;
    std::vector<std::string> miss;
    std::vector<std::uint64_t> keys(items.size());
    {
      std::lock_guard lock(mu_);
      for (std::size_t i = 0; i < items.size(); ++i) {
        keys[i] = key(op, items[i]);
        auto it = entries_.find(keys[i]);
        if (it != entries_.end()) {
          out[i] = it->second;
        } else {
          miss_idx.push_back(i);
          miss.push_back(items[i]);
        }
      }
    }
    if (miss.empty()) return out;
    count_request();
    auto fetched = fetch(miss);
    std::lock_guard lock(mu_);
    for (std::size_t m = 0; m < miss.size(); ++m) {
      const std::size_t i = miss_idx[m];
      out[i] = fetched[m];
      if (entries_.emplace(keys[i], fetched[m]).second) persist(keys[i], fetched[m]);
    }
    if (!path_.empty()) write_index();
    return out;
  }

  std::filesystem::path index_path() const { return path_.string() + ".index.json"; }

  void load() {
    if (!std::filesystem::exists(path_)) return;
    try {
      std::ifstream idx(index_path());
      if (!idx) throw std::runtime_error("missing index");
      auto j = nlohmann::json::parse(idx);
      if (j.at("backend").get<std::string>() != inner_.backend_id()) throw std::runtime_error("backend changed");
      const auto expected = j.at("records").get<std::size_t>();
      std::ifstream in(path_, std::ios::binary);
      std::size_t count = 0;
      while (in.peek() != std::char_traits<char>::eof()) {
        std::uint64_t k = 0;
        std::uint32_t d = 0;
        std::uint8_t m = 0;
        in.read(reinterpret_cast<char*>(&k), sizeof k);
        in.read(reinterpret_cast<char*>(&d), sizeof d);
        in.read(reinterpret_cast<char*>(&m), sizeof m);
        if (!in || d != inner_.dim() || m > 2) throw std::runtime_error("bad record header");
        Embedding e{std::vector<float>(d), static_cast<Modality>(m), 1.0};
        in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(d * sizeof(float)));
        if (!in) throw std::runtime_error("truncated record");
        entries_[k] = std::move(e);
        ++count;
      }
      if (count != expected) throw std::runtime_error("record count disagrees with index");
      records_ = count;
    } catch (const std::exception& e) {
      warn("embedding cache " + path_.string() + " is corrupt (" + e.what() + "); rebuilding");
      entries_.clear();
      records_ = 0;
      std::ofstream(path_, std::ios::binary | std::ios::trunc);
      write_index();
    }
  }

  void persist(std::uint64_t k, const Embedding& e) {
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    const auto d = static_cast<std::uint32_t>(e.dim());
    const auto m = static_cast<std::uint8_t>(e.modality);
    out.write(reinterpret_cast<const char*>(&k), sizeof k);
    out.write(reinterpret_cast<const char*>(&d), sizeof d);
    out.write(reinterpret_cast<const char*>(&m), sizeof m);
    out.write(reinterpret_cast<const char*>(e.values.data()), static_cast<std::streamsize>(d * sizeof(float)));
    ++records_;
  }

  void write_index() const {
    nlohmann::json j = {{"backend", inner_.backend_id()}, {"dim", inner_.dim()}, {"records", records_}};
    std::ofstream(index_path()) << j.dump() << '\n';
  }

  Scorer& inner_;
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::unordered_map<std::uint64_t, Embedding> entries_;
  std::size_t records_ = 0;
};

}  // namespace cachesteer
