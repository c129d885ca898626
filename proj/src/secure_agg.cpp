#include "qahfl/secure_agg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qahfl {

namespace {
constexpr double kScale = 65536.0;  // 2^16 fractional resolution
}

int32_t float_to_fixed(float v) {
  double scaled = std::nearbyint(static_cast<double>(v) * kScale);
  if (scaled < -2147483648.0 || scaled > 2147483647.0)
    throw std::overflow_error("float_to_fixed: " + std::to_string(v) + " out of range");
  return static_cast<int32_t>(scaled);
}

float fixed_to_float(int32_t q) { return static_cast<float>(q / kScale); }

std::vector<uint32_t> pair_mask(uint64_t session_seed, int lo, int hi, size_t dim) {
  if (lo >= hi) throw std::invalid_argument("pair_mask: need lo < hi");
  Rng rng = SeedTree(session_seed).child("pair").child(static_cast<uint64_t>(lo))
                .child(static_cast<uint64_t>(hi))
                .rng();
  std::vector<uint32_t> mask(dim);
  for (auto& m : mask) m = static_cast<uint32_t>(rng.next_u64() >> 32);
  return mask;
}

std::vector<uint32_t> masked_submission(uint64_t session_seed, int client, int n_clients,
                                        const std::vector<int32_t>& fixed) {
  if (client < 0 || client >= n_clients)
    throw std::invalid_argument("masked_submission: client id out of range");
  std::vector<uint32_t> out(fixed.size());
  for (size_t k = 0; k < fixed.size(); ++k) out[k] = static_cast<uint32_t>(fixed[k]);
  for (int other = 0; other < n_clients; ++other) {
    if (other == client) continue;
    int lo = std::min(client, other), hi = std::max(client, other);
    std::vector<uint32_t> mask = pair_mask(session_seed, lo, hi, fixed.size());
    if (client == lo)
      for (size_t k = 0; k < out.size(); ++k) out[k] += mask[k];
    else
      for (size_t k = 0; k < out.size(); ++k) out[k] -= mask[k];
  }
  return out;
}

SecureSumResult secure_sum(const std::vector<std::vector<float>>& vectors,
                           const std::set<int>& dropped, double tolerance,
                           uint64_t session_seed) {
  int n = static_cast<int>(vectors.size());
  if (n == 0) throw std::invalid_argument("secure_sum: no clients");
  size_t dim = vectors[0].size();
  if (dim == 0) throw std::invalid_argument("secure_sum: empty vectors");
  for (const auto& v : vectors)
    if (v.size() != dim) throw std::invalid_argument("secure_sum: ragged vectors");
  for (int d : dropped)
    if (d < 0 || d >= n) throw std::invalid_argument("secure_sum: dropped id out of range");

  SecureSumResult res;
  if (static_cast<double>(dropped.size()) > tolerance * n) {
    res.aborted = true;
    return res;
  }

  // The ring can only be decoded when the true total fits in 32 bits; the
  // simulation holds the plain vectors anyway, so check rather than wrap.
  std::vector<int64_t> plain(dim, 0);
  std::vector<std::vector<int32_t>> fixed(n);
  for (int i = 0; i < n; ++i) {
    fixed[i].resize(dim);
    for (size_t k = 0; k < dim; ++k) fixed[i][k] = float_to_fixed(vectors[i][k]);
    if (dropped.count(i)) continue;
    for (size_t k = 0; k < dim; ++k) plain[k] += fixed[i][k];
  }
  for (size_t k = 0; k < dim; ++k)
    if (plain[k] < INT32_MIN || plain[k] > INT32_MAX)
      throw std::overflow_error("secure_sum: total exceeds the fixed-point ring");

  std::vector<uint32_t> total(dim, 0);
  for (int i = 0; i < n; ++i) {
    if (dropped.count(i)) continue;
    std::vector<uint32_t> sub = masked_submission(session_seed, i, n, fixed[i]);
    for (size_t k = 0; k < dim; ++k) total[k] += sub[k];
  }

  // Survivor-dropped pairs left one dangling mask each; replay the pair seeds
  // to strip them. Masks between two dropped clients never entered the total.
  for (int d : dropped) {
    for (int i = 0; i < n; ++i) {
      if (i == d || dropped.count(i)) continue;
      int lo = std::min(i, d), hi = std::max(i, d);
      std::vector<uint32_t> mask = pair_mask(session_seed, lo, hi, dim);
      if (i == lo)
        for (size_t k = 0; k < dim; ++k) total[k] -= mask[k];
      else
        for (size_t k = 0; k < dim; ++k) total[k] += mask[k];
    }
  }

  res.sum.resize(dim);
  for (size_t k = 0; k < dim; ++k)
    res.sum[k] = fixed_to_float(static_cast<int32_t>(total[k]));
  return res;
}

}  // namespace qahfl
