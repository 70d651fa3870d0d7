#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pulsegrid {

// Base class for all library errors. Subsystems define narrow subclasses so
// callers can catch a specific failure without string matching.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Seeding and random draws.
//
// All stochastic choices in the library go through Rng so that a run is
// reproducible from a single master seed and independent of the standard
// library's unspecified distribution algorithms.

uint64_t splitmix64(uint64_t& state);

// Collapse (seed, stream tag, indices...) into one 64-bit stream seed.
// Streams derived with different tags or indices are statistically independent.
uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0);

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform integer in [lo, hi], inclusive. Rejection sampling, portable
  // across standard library implementations.
  int64_t uniform_int(int64_t lo, int64_t hi);

  // Uniform real in [0, 1) with 53 bits of precision.
  double uniform_real();

  // Standard normal via Box-Muller.
  double normal();

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Hashing and file helpers.

// FNV-1a, used for checkpoint and report integrity checks.
uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull);

std::vector<char> read_binary_file(const std::filesystem::path& path);

// Write via a temporary file in the same directory, then rename. A reader
// never observes a partially written file.
void atomic_write_file(const std::filesystem::path& path, const void* data, size_t len);
void atomic_write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace pulsegrid
