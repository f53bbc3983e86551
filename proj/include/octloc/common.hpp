#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace octloc {

// Error categories map onto CLI exit codes (see src/cli.cpp):
// ConfigError -> 2, DataError -> 3, IntegrityError -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Tensor shape violations are a flavour of bad data.
struct ShapeError : DataError {
  using DataError::DataError;
};

// splitmix64 finalizer. Used to derive independent, reproducible RNG streams
// from a base seed plus a stream id, so shuffling one consumer does not
// perturb another.
inline uint64_t hash_mix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return hash_mix(seed ^ hash_mix(stream));
}

}  // namespace octloc
