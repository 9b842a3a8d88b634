#pragma once

/**
 * Byte-level BPE tokenizer compatible with the published GPT-2 artifacts
 * (encoder.json + vocab.bpe / merges.txt).
 *
 * Tokens are stored internally as raw byte strings. The files on disk use the
 * GPT-2 printable remapping of bytes to unicode code points, which is undone
 * on load and reapplied on save.
 *
 * Pre-tokenization follows the GPT-2 split pattern
 *   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
 * with one approximation: every byte >= 0x80 is classified as a letter. That
 * keeps arbitrary (even invalid UTF-8) input encodable and round-trippable.
 */

#include "cachesteer/common.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cachesteer {

using TokenId = std::int32_t;

inline constexpr std::string_view kEndOfText = "<|endoftext|>";

struct TokenSeq {
  std::vector<TokenId> ids;
  std::vector<std::size_t> text_offsets;  // byte offset of each token in the source

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

namespace detail {

// GPT-2 bytes_to_unicode(): printable bytes map to themselves, the remaining
// 68 bytes are shifted to code points 256.. in ascending byte order.
inline const std::array<char32_t, 256>& byte_to_codepoint() {
  static const std::array<char32_t, 256> table = [] {
    std::array<bool, 256> printable{};
    for (int b = '!'; b <= '~'; ++b) printable[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
    std::array<char32_t, 256> t{};
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) t[b] = printable[b] ? char32_t(b) : next++;
    return t;
  }();
  return table;
}

inline const std::unordered_map<char32_t, std::uint8_t>& codepoint_to_byte() {
  static const auto table = [] {
    std::unordered_map<char32_t, std::uint8_t> t;
    const auto& fwd = byte_to_codepoint();
    for (int b = 0; b < 256; ++b) t.emplace(fwd[b], static_cast<std::uint8_t>(b));
    return t;
  }();
  return table;
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

/// Maps a GPT-2 unicode-remapped token string back to raw bytes.
inline std::string unmap_token(std::string_view utf8) {
  const auto& inv = codepoint_to_byte();
  std::string out;
  std::size_t i = 0;
  while (i < utf8.size()) {
    auto c = static_cast<unsigned char>(utf8[i]);
    char32_t cp = 0;
    std::size_t len = 1;
    if (c < 0x80) {
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else {
      len = 4;
      cp = c & 0x07;
    }
    if (i + len > utf8.size()) throw InputError("vocab: truncated UTF-8 in token");
    for (std::size_t k = 1; k < len; ++k) {
      cp = (cp << 6) | (static_cast<unsigned char>(utf8[i + k]) & 0x3F);
    }
    auto it = inv.find(cp);
    if (it == inv.end()) throw InputError("vocab: code point outside byte map");
    out.push_back(static_cast<char>(it->second));
    i += len;
  }
  return out;
}

inline std::string map_token(std::string_view bytes) {
  const auto& fwd = byte_to_codepoint();
  std::string out;
  for (char ch : bytes) append_utf8(out, fwd[static_cast<unsigned char>(ch)]);
  return out;
}

inline bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\v' || c == '\f' || c == '\r';
}
inline bool is_letter(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}
inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
inline bool is_other(unsigned char c) { return !is_space(c) && !is_letter(c) && !is_digit(c); }

/// Splits text into pre-tokens; returns (offset, length) pairs covering the input.
inline std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view s) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t n = s.size();
  auto at = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  auto run = [&](std::size_t k, auto pred) {
    while (k < n && pred(at(k))) ++k;
    return k;
  };
  std::size_t i = 0;
  while (i < n) {
    if (at(i) == '\'' && i + 1 < n) {
      std::string_view rest = s.substr(i + 1, 2);
      std::size_t len = 0;
      if (rest.starts_with("re") || rest.starts_with("ve") || rest.starts_with("ll")) {
        len = 3;
      } else if (rest[0] == 's' || rest[0] == 't' || rest[0] == 'm' || rest[0] == 'd') {
        len = 2;
      }
      if (len) {
        out.emplace_back(i, len);
        i += len;
        continue;
      }
    }
    std::size_t body = (at(i) == ' ' && i + 1 < n && !is_space(at(i + 1))) ? i + 1 : i;
    unsigned char c = at(body);
    if (!is_space(c)) {
      std::size_t end = is_letter(c)  ? run(body, is_letter)
                        : is_digit(c) ? run(body, is_digit)
                                      : run(body, is_other);
      out.emplace_back(i, end - i);
      i = end;
      continue;
    }
    // Whitespace run: leave the final char for the next token when one follows.
    std::size_t end = run(i, is_space);
    if (end < n && end - i > 1) --end;
    out.emplace_back(i, end - i);
    i = end;
  }
  return out;
}

struct PairHash {
  std::size_t operator()(const std::pair<std::string, std::string>& p) const {
    return static_cast<std::size_t>(fnv1a(p.second, fnv1a(p.first) ^ 0x9e37));
  }
};

}  // namespace detail

/// Immutable token alphabet plus ordered merge rules.
class Vocab {
 public:
  Vocab() = default;

  /// Builds from raw byte-string tokens; ids must be dense in [0, V).
  Vocab(std::vector<std::string> id_to_token,
        std::vector<std::pair<std::string, std::string>> merges, TokenId eot_id)
      : id_to_token_(std::move(id_to_token)), merges_(std::move(merges)), eot_id_(eot_id) {
    index();
  }

  /// Loads the GPT-2 file pair: token->id JSON and a merges text file.
  static Vocab load(const std::filesystem::path& vocab_json,
                    const std::filesystem::path& merges_txt) {
    std::ifstream vj(vocab_json);
    if (!vj) throw InputError("cannot open vocab file: " + vocab_json.string());
    nlohmann::json j;
    try {
      vj >> j;
    } catch (const nlohmann::json::exception& e) {
      throw InputError("vocab JSON parse error: " + std::string(e.what()));
    }
    std::vector<std::string> tokens(j.size());
    std::vector<bool> seen(j.size(), false);
    TokenId eot = -1;
    for (const auto& [key, val] : j.items()) {
      auto id = val.get<std::int64_t>();
      if (id < 0 || static_cast<std::size_t>(id) >= tokens.size() || seen[id]) {
        throw InputError("vocab ids are not dense");
      }
      seen[id] = true;
      tokens[id] = key == kEndOfText ? std::string(kEndOfText) : detail::unmap_token(key);
      if (key == kEndOfText) eot = static_cast<TokenId>(id);
    }
    if (eot < 0) throw InputError("vocab has no <|endoftext|> token");

    std::ifstream mf(merges_txt);
    if (!mf) throw InputError("cannot open merges file: " + merges_txt.string());
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    while (std::getline(mf, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.starts_with("#version")) continue;
      auto sp = line.find(' ');
      if (sp == std::string::npos) throw InputError("malformed merge line: " + line);
      merges.emplace_back(detail::unmap_token(line.substr(0, sp)),
                          detail::unmap_token(line.substr(sp + 1)));
    }
    return Vocab(std::move(tokens), std::move(merges), eot);
  }

  void save(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) const {
    nlohmann::ordered_json j;
    for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
      const auto& tok = id_to_token_[id];
      j[static_cast<TokenId>(id) == eot_id_ ? tok : detail::map_token(tok)] = id;
    }
    std::ofstream(vocab_json) << j.dump();
    std::ofstream mf(merges_txt);
    mf << "#version: 0.2\n";
    for (const auto& [a, b] : merges_) mf << detail::map_token(a) << ' ' << detail::map_token(b) << '\n';
  }

  std::size_t size() const { return id_to_token_.size(); }
  TokenId eot_id() const { return eot_id_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  const std::string& token_bytes(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      throw InputError("unknown token id " + std::to_string(id));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(std::string_view bytes) const {
    auto it = token_to_id_.find(std::string(bytes));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  bool starts_capitalized(TokenId id) const { return capitalized_.at(checked(id)); }

  /// Greedy rank-ordered BPE over GPT-2 pre-tokens.
  TokenSeq encode(std::string_view text) const {
    TokenSeq out;
    for (auto [off, len] : detail::pretokenize(text)) {
      std::size_t pos = off;
      for (const auto& piece : bpe(text.substr(off, len))) {
        out.ids.push_back(token_to_id_.at(piece));
        out.text_offsets.push_back(pos);
        pos += piece.size();
      }
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += token_bytes(id);
    return out;
  }
  std::string decode(const TokenSeq& seq) const { return decode(seq.ids); }

 private:
  std::size_t checked(TokenId id) const {
    (void)token_bytes(id);
    return static_cast<std::size_t>(id);
  }

  void index() {
    token_to_id_.clear();
    for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
      if (static_cast<TokenId>(id) == eot_id_) continue;
      if (id_to_token_[id].empty()) throw InputError("vocab contains an empty token");
      token_to_id_.emplace(id_to_token_[id], static_cast<TokenId>(id));
    }
    for (int b = 0; b < 256; ++b) {
      if (!token_to_id_.contains(std::string(1, static_cast<char>(b)))) {
        throw InputError("vocab is missing base byte " + std::to_string(b));
      }
    }
    ranks_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      if (!token_to_id_.contains(merges_[r].first + merges_[r].second)) {
        throw InputError("merge result missing from vocab at rank " + std::to_string(r));
      }
      ranks_.emplace(merges_[r], r);
    }
    capitalized_.assign(id_to_token_.size(), false);
    for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
      std::string_view t = id_to_token_[id];
      if (t.starts_with(' ')) t.remove_prefix(1);
      for (char ch : t) {
        auto c = static_cast<unsigned char>(ch);
        if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) {
          capitalized_[id] = c <= 'Z';
          break;
        }
      }
    }
  }

  std::vector<std::string> bpe(std::string_view word) const {
    std::vector<std::string> parts;
    parts.reserve(word.size());
    for (char ch : word) parts.emplace_back(1, ch);
    constexpr auto kNone = std::numeric_limits<std::size_t>::max();
    while (parts.size() > 1) {
      std::size_t best = kNone;
      std::pair<std::string, std::string> best_pair;
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        auto it = ranks_.find({parts[i], parts[i + 1]});
        if (it != ranks_.end() && it->second < best) {
          best = it->second;
          best_pair = it->first;
        }
      }
      if (best == kNone) break;
      std::vector<std::string> merged;
      merged.reserve(parts.size());
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i + 1 < parts.size() && parts[i] == best_pair.first && parts[i + 1] == best_pair.second) {
          merged.push_back(parts[i] + parts[i + 1]);
          ++i;
        } else {
          merged.push_back(std::move(parts[i]));
        }
      }
      parts = std::move(merged);
    }
    return parts;
  }

  std::vector<std::string> id_to_token_;
  std::vector<std::pair<std::string, std::string>> merges_;
  TokenId eot_id_ = -1;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::unordered_map<std::pair<std::string, std::string>, std::size_t, detail::PairHash> ranks_;
  std::vector<bool> capitalized_;
};

inline TokenSeq encode(std::string_view text, const Vocab& vocab) { return vocab.encode(text); }
inline std::string decode(const TokenSeq& seq, const Vocab& vocab) { return vocab.decode(seq); }
inline bool starts_capitalized(TokenId id, const Vocab& vocab) { return vocab.starts_capitalized(id); }

}  // namespace cachesteer
