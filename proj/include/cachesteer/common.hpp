#pragma once

// Shared error types and small utilities used across the library.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cachesteer {

inline constexpr std::string_view kVersion = "0.3.0";

/// Malformed input or arguments (CLI exit code 2).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A well-formed request that has no valid answer, e.g. a degenerate
/// arithmetic direction (CLI exit code 3).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scorer backend failures: timeouts, protocol violations (CLI exit code 4).
/// Retriable by contract.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

/// 64-bit FNV-1a. Stable across platforms; used for content keys and checksums.
inline std::uint64_t fnv1a(std::span<const std::byte> data,
                           std::uint64_t h = kFnvOffset) {
  for (std::byte b : data) {
    h ^= static_cast<std::uint64_t>(b);
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a(std::as_bytes(std::span(s.data(), s.size())), h);
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace cachesteer
