#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hopseg {

// Input that violates a documented schema or precondition. CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Category key lookup failures (unknown object, unresolvable embedding key, ...).
class LookupError : public ValidationError {
 public:
  explicit LookupError(const std::string& what) : ValidationError(what) {}
};

// Stable 64-bit FNV-1a; used wherever a seed must be derived from a string so
// results do not depend on the standard library's std::hash.
inline uint64_t fnv1a(const std::string& s, uint64_t seed = 0xcbf29ce484222325ULL) {
  uint64_t h = seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t mix_seeds(uint64_t a, uint64_t b) {
  // splitmix64 finalizer over the pair
  uint64_t z = a + 0x9e3779b97f4a7c15ULL + b;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace hopseg
