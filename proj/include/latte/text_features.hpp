#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "latte/errors.hpp"

namespace latte {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

/// Lowercased alphanumeric runs; everything else separates tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

/// Hashed bag-of-tokens. `counts` is sparse and sorted by bucket.
struct TextFeaturization {
  std::size_t vocab_size = 0;
  std::vector<std::pair<std::size_t, int>> counts;

  int total() const {
    int n = 0;
    for (const auto& [_, c] : counts) n += c;
    return n;
  }
  bool empty() const { return counts.empty(); }
  friend bool operator==(const TextFeaturization&, const TextFeaturization&) = default;
};

inline constexpr std::size_t kMinVocab = 64;

inline std::size_t token_bucket(std::string_view token, std::size_t vocab_size) {
  return static_cast<std::size_t>(fnv1a64(token) % vocab_size);
}

inline TextFeaturization featurize_text(std::string_view text, std::size_t vocab_size) {
  if (vocab_size < kMinVocab)
    throw ConfigError("vocab size must be >= " + std::to_string(kMinVocab));
  std::vector<std::size_t> buckets;
  for (const auto& tok : tokenize(text)) buckets.push_back(token_bucket(tok, vocab_size));
  std::sort(buckets.begin(), buckets.end());
  TextFeaturization f{vocab_size, {}};
  for (std::size_t b : buckets) {
    if (!f.counts.empty() && f.counts.back().first == b)
      ++f.counts.back().second;
    else
      f.counts.emplace_back(b, 1);
  }
  return f;
}

}  // namespace latte
