#pragma once

/**
 * Model configuration and the tensor container format.
 *
 * Container layout (one file):
 *   u64 little-endian   header length N
 *   N bytes             JSON header
 *   payload             raw little-endian float32 tensors
 *
 * Header:
 *   {"format": "cachesteer-tensors", "version": 1,
 *    "config": {"n_layers":..,"n_heads":..,"d_model":..,"vocab_size":..,"max_positions":..},
 *    "tensors": {"wte": {"dtype":"F32","shape":[V,d],"offset":0}, ...},
 *    "checksum": "<fnv1a-64 hex of payload>"}   (checksum optional)
 *
 * Tensor names and layouts follow the GPT-2 reference checkpoint: linear
 * weights are stored [in, out] and applied as x * W.
 */

#include "cachesteer/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace cachesteer {

struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_model = 0;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 0;

  std::size_t d_head() const { return n_heads ? d_model / n_heads : 0; }
  std::size_t d_ff() const { return 4 * d_model; }

  void validate() const {
    if (!n_layers || !n_heads || !d_model || !vocab_size || !max_positions) {
      throw InputError("model config: all sizes must be positive");
    }
    if (d_model % n_heads != 0) throw InputError("model config: d_model must be a multiple of n_heads");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},   {"n_heads", c.n_heads},     {"d_model", c.d_model},
       {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_positions").get_to(c.max_positions);
}

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

/// Name -> tensor map plus the config it was exported for.
struct TensorFile {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  static TensorFile read(const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open model file: " + path.string());
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
    if (!in || header_len > (1u << 26)) throw InputError("model file: bad header length");
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    nlohmann::json h;
    try {
      h = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
      throw InputError("model file: header is not JSON: " + std::string(e.what()));
    }
    TensorFile tf;
    try {
      tf.config = h.at("config").get<ModelConfig>();
      if (h.contains("checksum")) {
        auto want = h["checksum"].get<std::string>();
        auto got = hex64(fnv1a(std::as_bytes(std::span(payload.data(), payload.size()))));
        if (want != got) throw InputError("model file: payload checksum mismatch");
      }
      for (const auto& [name, meta] : h.at("tensors").items()) {
        if (meta.at("dtype").get<std::string>() != "F32") {
          throw InputError("model file: tensor " + name + " is not F32");
        }
        Tensor t;
        t.shape = meta.at("shape").get<std::vector<std::size_t>>();
        std::size_t count = 1;
        for (auto s : t.shape) count *= s;
        auto offset = meta.at("offset").get<std::size_t>();
        if (offset + count * sizeof(float) > payload.size()) {
          throw InputError("model file: tensor " + name + " overruns payload");
        }
        t.data.resize(count);
        std::memcpy(t.data.data(), payload.data() + offset, count * sizeof(float));
        tf.tensors.emplace(name, std::move(t));
      }
    } catch (const nlohmann::json::exception& e) {
      throw InputError("model file: malformed header: " + std::string(e.what()));
    }
    tf.config.validate();
    return tf;
  }

  void write(const std::filesystem::path& path) const {
    std::vector<char> payload;
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, t] : this->tensors) {
      tensors[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"offset", payload.size()}};
      const auto* p = reinterpret_cast<const char*>(t.data.data());
      payload.insert(payload.end(), p, p + t.data.size() * sizeof(float));
    }
    nlohmann::json h = {{"format", "cachesteer-tensors"},
                        {"version", 1},
                        {"config", config},
                        {"tensors", tensors},
                        {"checksum", hex64(fnv1a(std::as_bytes(std::span(payload.data(), payload.size()))))}};
    std::string header = h.dump();
    std::uint64_t len = header.size();
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw InputError("cannot write model file: " + path.string());
  }
};

/// Tensor names the engine requires, in GPT-2 checkpoint naming.
inline std::vector<std::string> required_tensor_names(const ModelConfig& c) {
  std::vector<std::string> names{"wte", "wpe", "ln_f.weight", "ln_f.bias"};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    for (const char* s : {"ln_1.weight", "ln_1.bias", "attn.c_attn.weight", "attn.c_attn.bias",
                          "attn.c_proj.weight", "attn.c_proj.bias", "ln_2.weight", "ln_2.bias",
                          "mlp.c_fc.weight", "mlp.c_fc.bias", "mlp.c_proj.weight", "mlp.c_proj.bias"}) {
      names.push_back(p + s);
    }
  }
  return names;
}

template <class T>
struct LayerWeights {
  std::vector<T> ln1_g, ln1_b;
  std::vector<T> attn_w, attn_b;  // [d, 3d], [3d]
  std::vector<T> proj_w, proj_b;  // [d, d], [d]
  std::vector<T> ln2_g, ln2_b;
  std::vector<T> fc_w, fc_b;      // [d, 4d], [4d]
  std::vector<T> mproj_w, mproj_b;  // [4d, d], [d]
};

/// Frozen parameters of a pre-layer-norm GPT-2 decoder, converted to scalar T.
template <class T>
struct Weights {
  ModelConfig config;
  std::vector<T> wte;  // [V, d]; also the tied output projection
  std::vector<T> wpe;  // [P, d]
  std::vector<LayerWeights<T>> layers;
  std::vector<T> lnf_g, lnf_b;

  static Weights from_file(const TensorFile& tf) {
    const auto& c = tf.config;
    c.validate();
    const std::size_t d = c.d_model;
    auto take = [&](const std::string& name, std::vector<std::size_t> shape) {
      auto it = tf.tensors.find(name);
      if (it == tf.tensors.end()) throw InputError("model file: missing tensor " + name);
      if (it->second.shape != shape) throw InputError("model file: wrong shape for " + name);
      std::vector<T> out(it->second.data.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        float v = it->second.data[i];
        if (!std::isfinite(v)) throw InputError("model file: non-finite value in " + name);
        out[i] = static_cast<T>(v);
      }
      return out;
    };
    Weights w;
    w.config = c;
    w.wte = take("wte", {c.vocab_size, d});
    w.wpe = take("wpe", {c.max_positions, d});
    w.lnf_g = take("ln_f.weight", {d});
    w.lnf_b = take("ln_f.bias", {d});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = "h." + std::to_string(l) + ".";
      LayerWeights<T> lw;
      lw.ln1_g = take(p + "ln_1.weight", {d});
      lw.ln1_b = take(p + "ln_1.bias", {d});
      lw.attn_w = take(p + "attn.c_attn.weight", {d, 3 * d});
      lw.attn_b = take(p + "attn.c_attn.bias", {3 * d});
      lw.proj_w = take(p + "attn.c_proj.weight", {d, d});
      lw.proj_b = take(p + "attn.c_proj.bias", {d});
      lw.ln2_g = take(p + "ln_2.weight", {d});
      lw.ln2_b = take(p + "ln_2.bias", {d});
      lw.fc_w = take(p + "mlp.c_fc.weight", {d, 4 * d});
      lw.fc_b = take(p + "mlp.c_fc.bias", {4 * d});
      lw.mproj_w = take(p + "mlp.c_proj.weight", {4 * d, d});
      lw.mproj_b = take(p + "mlp.c_proj.bias", {d});
      w.layers.push_back(std::move(lw));
    }
    return w;
  }

  static Weights load(const std::filesystem::path& path) { return from_file(TensorFile::read(path)); }

  /// Content checksum over every parameter; used to show weights stay frozen.
  std::uint64_t checksum() const {
    std::uint64_t h = kFnvOffset;
    auto mix = [&h](const std::vector<T>& v) {
      h = fnv1a(std::as_bytes(std::span(v.data(), v.size())), h);
    };
    mix(wte);
    mix(wpe);
    for (const auto& l : layers) {
      for (const auto* v : {&l.ln1_g, &l.ln1_b, &l.attn_w, &l.attn_b, &l.proj_w, &l.proj_b,
                            &l.ln2_g, &l.ln2_b, &l.fc_w, &l.fc_b, &l.mproj_w, &l.mproj_b}) {
        mix(*v);
      }
    }
    mix(lnf_g);
    mix(lnf_b);
    return h;
  }

  template <class U>
  Weights<U> cast() const {
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    Weights<U> w;
    w.config = config;
    w.wte = conv(wte);
    w.wpe = conv(wpe);
    w.lnf_g = conv(lnf_g);
    w.lnf_b = conv(lnf_b);
    for (const auto& l : layers) {
      w.layers.push_back({conv(l.ln1_g), conv(l.ln1_b), conv(l.attn_w), conv(l.attn_b),
                          conv(l.proj_w), conv(l.proj_b), conv(l.ln2_g), conv(l.ln2_b),
                          conv(l.fc_w), conv(l.fc_b), conv(l.mproj_w), conv(l.mproj_b)});
    }
    return w;
  }
};

}  // namespace cachesteer
