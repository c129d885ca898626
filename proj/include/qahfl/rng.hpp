#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace qahfl {

// 64-bit FNV-1a over a byte string.
uint64_t fnv1a64(std::string_view bytes, uint64_t basis = 14695981039346656037ull);

// splitmix64 finalizer; good avalanche, used to whiten derived seeds.
uint64_t mix64(uint64_t x);

// Deterministic random stream. Wraps mt19937_64 but implements its own
// Box-Muller gaussian because std::normal_distribution is free to differ
// between standard library implementations, and run outputs must be
// reproducible bit-for-bit from the seed alone.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  // Unbiased integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n);

  // Standard normal via Box-Muller; caches the second deviate.
  double gaussian();
  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  // Fisher-Yates using below(), so shuffles are platform-stable too.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Hierarchical seed derivation. Every randomness consumer gets its own node,
// addressed by a path of labels from the master seed, e.g.
//   SeedTree(master).child("client").child(7).child("round").child(2).rng()
// Distinct paths give independent streams; the same path always gives the
// same stream, regardless of what other components consumed.
class SeedTree {
 public:
  explicit SeedTree(uint64_t master_seed);

  SeedTree child(std::string_view label) const;
  SeedTree child(uint64_t index) const;

  uint64_t seed() const { return state_; }
  Rng rng() const { return Rng(state_); }

 private:
  uint64_t state_;
};

}  // namespace qahfl
