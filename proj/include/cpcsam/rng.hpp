#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace cpcsam {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return splitmix64(splitmix64(seed) ^ (salt + 0x632BE59BD9B4E019ULL));
}

// FNV-1a, for naming independent RNG streams.
inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) { return derive_seed(seed, hash_name(name)); }

inline std::string serialize_rng(const std::mt19937_64& gen) {
  std::ostringstream out;
  out << gen;
  return out.str();
}

inline std::mt19937_64 deserialize_rng(const std::string& text) {
  std::mt19937_64 gen;
  std::istringstream in(text);
  in >> gen;
  return gen;
}

}  // namespace cpcsam
