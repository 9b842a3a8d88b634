#pragma once

/**
 * Embedding arithmetic over image and text terms.
 *
 *   expr := term (('+' | '-') term)*
 *   term := [number '*'] ( 'img(' path ')' | 'txt(' quoted-string ')' )
 *
 * Because + and - are left-associative and the only operators, an expression
 * is stored flat as a list of signed, weighted terms.
 */

#include "cachesteer/scorer.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace cachesteer {

inline constexpr double kDegenerateNorm = 1e-6;

class SyntaxError : public InputError {
 public:
  SyntaxError(const std::string& what, std::size_t offset)
      : InputError("syntax error at offset " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct Term {
  enum class Kind { image, text };
  Kind kind = Kind::image;
  std::string ref;      // path for images, literal for text
  double weight = 1.0;  // sign folded in

  static Term img(std::string path, double w = 1.0) { return {Kind::image, std::move(path), w}; }
  static Term txt(std::string text, double w = 1.0) { return {Kind::text, std::move(text), w}; }
  bool operator==(const Term&) const = default;
};

struct ArithExpr {
  std::vector<Term> terms;
  bool operator==(const ArithExpr&) const = default;
};

namespace detail {

class ExprParser {
 public:
  explicit ExprParser(std::string_view s) : s_(s) {}

  ArithExpr parse() {
    ArithExpr e;
    skip_ws();
    if (pos_ == s_.size()) throw SyntaxError("empty expression", pos_);
    e.terms.push_back(term(1.0));
    for (;;) {
      skip_ws();
      if (pos_ == s_.size()) break;
      const std::size_t op_at = pos_;
      const char op = s_[pos_];
      if (op != '+' && op != '-') throw SyntaxError("expected '+' or '-'", pos_);
      ++pos_;
      skip_ws();
      if (pos_ == s_.size()) throw SyntaxError("operator without right operand", op_at);
      e.terms.push_back(term(op == '-' ? -1.0 : 1.0));
    }
    return e;
  }

 private:
  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  Term term(double sign) {
    double w = 1.0;
    const char c = s_[pos_];
    if ((c >= '0' && c <= '9') || c == '.') {
      const std::size_t at = pos_;
      const auto [ptr, ec] = std::from_chars(s_.data() + pos_, s_.data() + s_.size(), w);
      if (ec != std::errc{}) throw SyntaxError("bad number", at);
      if (!std::isfinite(w)) throw SyntaxError("weight must be finite", at);
      pos_ = static_cast<std::size_t>(ptr - s_.data());
      skip_ws();
      if (pos_ == s_.size() || s_[pos_] != '*') throw SyntaxError("expected '*' after weight", pos_);
      ++pos_;
      skip_ws();
    }
    const std::size_t at = pos_;
    if (s_.substr(pos_).starts_with("img(")) {
      pos_ += 4;
      const auto close = s_.find(')', pos_);
      if (close == std::string_view::npos) throw SyntaxError("unterminated img(", at);
      std::string path(s_.substr(pos_, close - pos_));
      if (path.empty()) throw SyntaxError("empty image path", pos_);
      pos_ = close + 1;
      return Term::img(std::move(path), sign * w);
    }
    if (s_.substr(pos_).starts_with("txt(")) {
      pos_ += 4;
      if (pos_ >= s_.size() || s_[pos_] != '"') throw SyntaxError("expected quoted string", pos_);
      ++pos_;
      std::string text;
      for (;;) {
        if (pos_ >= s_.size()) throw SyntaxError("unterminated string", at);
        const char ch = s_[pos_++];
        if (ch == '"') break;
        if (ch == '\\') {
          if (pos_ >= s_.size()) throw SyntaxError("dangling escape", pos_);
          text += s_[pos_++];
        } else {
          text += ch;
        }
      }
      if (pos_ >= s_.size() || s_[pos_] != ')') throw SyntaxError("expected ')'", pos_);
      ++pos_;
      if (text.empty()) throw SyntaxError("empty text term", at);
      return Term::txt(std::move(text), sign * w);
    }
    throw SyntaxError("expected img(...) or txt(\"...\")", at);
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

inline std::string format_weight(double w) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, w);
  return std::string(buf, ptr);
}

}  // namespace detail

inline ArithExpr parse(std::string_view expr) { return detail::ExprParser(expr).parse(); }

/// Canonical form; parse(to_string(e)) == e.
inline std::string to_string(const ArithExpr& e) {
  std::string out;
  for (std::size_t i = 0; i < e.terms.size(); ++i) {
    const auto& t = e.terms[i];
    double w = t.weight;
    if (i == 0) {
      // the grammar has no unary minus
      if (w < 0) throw InputError("canonical form requires a non-negative leading weight");
    } else {
      out += w < 0 ? " - " : " + ";
      w = std::abs(w);
    }
    if (w != 1.0) out += detail::format_weight(w) + "*";
    if (t.kind == Term::Kind::image) {
      out += "img(" + t.ref + ")";
    } else {
      out += "txt(\"";
      for (char c : t.ref) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
      }
      out += "\")";
    }
  }
  return out;
}

/**
 * Weighted sum of unit-norm term embeddings, not renormalized. Image paths
 * are resolved against `asset_root` when relative.
 */
inline Embedding evaluate(const ArithExpr& e, Scorer& scorer, const std::filesystem::path& asset_root = {}) {
  if (e.terms.empty()) throw InputError("empty expression");
  std::vector<std::string> texts, images;
  for (const auto& t : e.terms) {
    if (!std::isfinite(t.weight)) throw InputError("term weight must be finite");
    if (t.kind == Term::Kind::text) {
      texts.push_back(t.ref);
    } else {
      const std::filesystem::path p = t.ref;
      images.push_back(read_file_bytes(p.is_absolute() || asset_root.empty() ? p : asset_root / p));
    }
  }
  const auto temb = texts.empty() ? std::vector<Embedding>{} : scorer.embed_texts(texts);
  const auto iemb = images.empty() ? std::vector<Embedding>{} : scorer.embed_images(images);
  std::vector<double> acc(scorer.dim(), 0.0);
  std::size_t ti = 0, ii = 0;
  for (const auto& t : e.terms) {
    const auto& v = t.kind == Term::Kind::text ? temb[ti++] : iemb[ii++];
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += t.weight * static_cast<double>(v.values[k]);
  }
  Embedding out{std::vector<float>(acc.begin(), acc.end()), Modality::derived, 1.0};
  out.raw_norm = l2_norm(out.values);
  if (!(out.raw_norm >= kDegenerateNorm)) throw DomainError("degenerate direction: expression evaluates to ~zero");
  return out;
}

inline Embedding evaluate(std::string_view expr, Scorer& scorer, const std::filesystem::path& asset_root = {}) {
  return evaluate(parse(expr), scorer, asset_root);
}

/// minuend - subtrahend + query: transfers the pair's direction onto the query.
inline Embedding relation_apply(const Term& minuend, const Term& subtrahend, const Term& query, Scorer& scorer,
                                const std::filesystem::path& asset_root = {}) {
  ArithExpr e{{minuend, subtrahend, query}};
  e.terms[1].weight = -e.terms[1].weight;
  return evaluate(e, scorer, asset_root);
}

/// Parses a single term such as img(x.png) or txt("italy").
inline Term parse_term(std::string_view s) {
  auto e = parse(s);
  if (e.terms.size() != 1) throw InputError("expected a single term: " + std::string(s));
  return e.terms.front();
}

}  // namespace cachesteer
