#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ktrans/corpus.hpp"

namespace ktrans::testing {

// Target side equals the source side.
inline ParallelCorpus copy_task(std::size_t vocab_words, std::size_t pairs, std::size_t min_len,
                                std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len), word(0, vocab_words - 1);
  ParallelCorpus c;
  for (std::size_t i = 0; i < pairs; ++i) {
    std::vector<std::string> s(len(rng));
    for (auto& t : s) t = "w" + std::to_string(word(rng));
    c.source.push_back(s);
    c.target.push_back(s);
  }
  return c;
}

inline std::vector<std::string> numbered_tokens(const std::string& prefix, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

}  // namespace ktrans::testing
