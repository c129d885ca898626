#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "qahfl/rng.hpp"

namespace qahfl {

// Secure-sum simulation: clients submit fixed-point vectors blinded by
// pairwise antisymmetric masks, so the server learns only the total. All
// arithmetic is in the mod 2^32 ring, which makes mask cancellation exact;
// floating-point masking could not guarantee that.

// Fixed-point codec at 2^16 scale, ties to even. Throws std::overflow_error
// when the value cannot be represented in 32 bits.
int32_t float_to_fixed(float v);
float fixed_to_float(int32_t q);

// The shared mask stream of the client pair (lo, hi), lo < hi. Client lo adds
// the stream to its submission, client hi subtracts it.
std::vector<uint32_t> pair_mask(uint64_t session_seed, int lo, int hi, size_t dim);

// One client's blinded submission: its fixed-point vector plus all pairwise
// masks it participates in, wrapped mod 2^32.
std::vector<uint32_t> masked_submission(uint64_t session_seed, int client, int n_clients,
                                        const std::vector<int32_t>& fixed);

struct SecureSumResult {
  bool aborted = false;
  std::vector<float> sum;  // decoded total, empty on abort
};

// Runs a full masked-sum round over `vectors`: every client submits, the
// members of `dropped` vanish before the server adds things up, and the
// dangling masks of survivor-dropped pairs are cancelled by replaying the
// pair seeds. Aborts (rather than recovering) when more than
// tolerance * n clients dropped. The decoded sum is bit-exact equal to the
// plain fixed-point sum of all surviving clients' vectors.
// Throws std::invalid_argument on empty/ragged input or a bad dropped id, and
// std::overflow_error when the true sum cannot fit the fixed-point ring.
SecureSumResult secure_sum(const std::vector<std::vector<float>>& vectors,
                           const std::set<int>& dropped, double tolerance,
                           uint64_t session_seed);

}  // namespace qahfl
