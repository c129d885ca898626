#include "qahfl/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace qahfl {

uint64_t fnv1a64(std::string_view bytes, uint64_t basis) {
  uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

uint64_t Rng::below(uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  // Rejection sampling on the top of the range to avoid modulo bias.
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] so the log is finite.
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

SeedTree::SeedTree(uint64_t master_seed) : state_(mix64(master_seed)) {}

SeedTree SeedTree::child(std::string_view label) const {
  SeedTree t(0);
  t.state_ = mix64(state_ ^ fnv1a64(label));
  return t;
}

SeedTree SeedTree::child(uint64_t index) const {
  SeedTree t(0);
  // Feed the index through FNV as raw bytes so child("x") and child(i)
  // cannot collide by construction of the same byte string.
  char buf[9];
  buf[0] = '#';
  for (int i = 0; i < 8; ++i) buf[1 + i] = static_cast<char>((index >> (8 * i)) & 0xff);
  t.state_ = mix64(state_ ^ fnv1a64(std::string_view(buf, 9)));
  return t;
}

}  // namespace qahfl
