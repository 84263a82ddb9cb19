#ifndef ESPRUNE_RANDOM_HPP_
#define ESPRUNE_RANDOM_HPP_

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace esprune {

using Rng = std::mt19937_64;

/// Generator keyed by a root seed and a path of indices, e.g.
/// (run seed, generation, offspring index). Distinct paths give independent
/// streams; the same path always gives the same stream.
inline Rng child_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::vector<std::uint32_t> words;
  words.reserve(2 * (path.size() + 1));
  const auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (std::uint64_t v : path) push(v);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

/// 64-bit seed drawn from a child stream.
inline std::uint64_t child_seed(std::uint64_t seed,
                                std::initializer_list<std::uint64_t> path) {
  return child_rng(seed, path)();
}

}  // namespace esprune

#endif  // ESPRUNE_RANDOM_HPP_
