#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace ucl {

namespace detail {

// splitmix64, used only to expand and mix seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

/// Derives independent, named RNG substreams from one root seed so that
/// components (model init, data order, augmentation, reservoir, ...) can be
/// reseeded and tested in isolation.
class RngHub {
 public:
  explicit RngHub(std::uint64_t root_seed) : root_(root_seed) {}

  std::uint64_t root() const { return root_; }

  std::uint64_t seed_for(const std::string& name) const {
    return detail::splitmix64(root_ ^ detail::fnv1a(name));
  }

  std::mt19937_64 stream(const std::string& name) const {
    return std::mt19937_64(seed_for(name));
  }

 private:
  std::uint64_t root_;
};

/// Serializes engine state so an interrupted run resumes bit-exactly.
inline std::string rng_state_to_string(const std::mt19937_64& g) {
  std::ostringstream out;
  out << g;
  return out.str();
}

inline void rng_state_from_string(std::mt19937_64& g, const std::string& s) {
  std::istringstream in(s);
  in >> g;
}

}  // namespace ucl
