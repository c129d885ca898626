#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "qahfl/privacy.hpp"
#include "qahfl/secure_agg.hpp"

using namespace qahfl;

TEST_CASE("per-round epsilon matches the closed form") {
  // 2 * sqrt(2 * ln(1.25e5)) = 9.68961052521078, then divided by n * sigma.
  CHECK(per_round_epsilon(100, 1.3, 1e-5) == doctest::Approx(0.0745354655785445).epsilon(1e-12));
  CHECK(per_round_epsilon(1, 1.1, 1e-5) == doctest::Approx(8.80873684110071).epsilon(1e-12));
  CHECK(per_round_epsilon(240, 1.5, 1e-5) == doctest::Approx(0.0269155847922522).epsilon(1e-12));
  CHECK(per_round_epsilon(500, 1.1, 1e-5) == doctest::Approx(0.0176174736822014).epsilon(1e-12));
}

TEST_CASE("per-round epsilon rejects bad arguments") {
  CHECK_THROWS_AS(per_round_epsilon(0, 1.3, 1e-5), std::invalid_argument);
  CHECK_THROWS_AS(per_round_epsilon(10, 0.0, 1e-5), std::invalid_argument);
  CHECK_THROWS_AS(per_round_epsilon(10, -1.0, 1e-5), std::invalid_argument);
  CHECK_THROWS_AS(per_round_epsilon(10, 1.3, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(per_round_epsilon(10, 1.3, 1.0), std::invalid_argument);
}

TEST_CASE("tier calibration strengthens noise with quality") {
  PrivacyParams low = privacy_for(QualityTier::Low);
  PrivacyParams mid = privacy_for(QualityTier::Medium);
  PrivacyParams high = privacy_for(QualityTier::High);
  CHECK(low.sigma == 1.1);
  CHECK(low.max_epsilon == 2.0);
  CHECK(mid.sigma == 1.3);
  CHECK(mid.max_epsilon == 4.0);
  CHECK(high.sigma == 1.5);
  CHECK(high.max_epsilon == 8.0);
  CHECK(low.delta == 1e-5);
  CHECK(mid.clip_norm == 1.0);

  PrivacyParams uni = uniform_privacy();
  CHECK(uni.sigma == 1.3);
  CHECK(uni.max_epsilon == 2.0);
}

TEST_CASE("L2 clipping scales long vectors and passes short ones") {
  std::vector<float> v{3.0f, 4.0f};  // norm 5
  double factor = clip_l2(v, 1.0);
  CHECK(factor == doctest::Approx(0.2));
  CHECK(v[0] == doctest::Approx(0.6f));
  CHECK(v[1] == doctest::Approx(0.8f));
  double norm = std::sqrt(v[0] * v[0] + v[1] * v[1]);
  CHECK(norm == doctest::Approx(1.0));

  std::vector<float> w{0.3f, 0.4f};  // norm 0.5, under the bound
  CHECK(clip_l2(w, 1.0) == 1.0);
  CHECK(w[0] == 0.3f);
  CHECK(w[1] == 0.4f);

  // Clipping to the exact norm leaves the vector alone.
  std::vector<float> u{3.0f, 4.0f};
  CHECK(clip_l2(u, 5.0) == 1.0);

  CHECK_THROWS_AS(clip_l2(v, 0.0), std::invalid_argument);
}

TEST_CASE("gaussian mechanism adds noise at sigma times clip scale") {
  const size_t n = 200000;
  std::vector<float> v(n, 0.0f);
  Rng rng(2024);
  gaussian_mechanism(v, 1.3, 1.0, rng);
  double mean = 0.0;
  for (float x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (float x : v) var += (x - mean) * (x - mean);
  var /= n;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::sqrt(var) == doctest::Approx(1.3).epsilon(0.02));

  // Scale doubles with the clip bound.
  std::vector<float> w(n, 0.0f);
  Rng rng2(2024);
  gaussian_mechanism(w, 1.3, 2.0, rng2);
  CHECK(w[0] == doctest::Approx(2.0f * v[0]));

  // Deterministic per seed.
  std::vector<float> a(8, 1.0f), b(8, 1.0f);
  Rng r1(7), r2(7);
  gaussian_mechanism(a, 1.1, 1.0, r1);
  gaussian_mechanism(b, 1.1, 1.0, r2);
  CHECK(a == b);

  // sigma 0 is the identity (used when privacy is ablated away).
  std::vector<float> c{1.0f, -2.0f};
  Rng r3(9);
  gaussian_mechanism(c, 0.0, 1.0, r3);
  CHECK(c[0] == 1.0f);
  CHECK(c[1] == -2.0f);
}

TEST_CASE("renyi composition epsilon matches the frozen grid optimum") {
  CHECK(rdp_epsilon(3, 1.3, 1e-5) == doctest::Approx(7.28349011594247).epsilon(1e-12));
  CHECK(rdp_epsilon(100, 50.0, 1e-5) == doctest::Approx(0.979705227707093).epsilon(1e-12));
  CHECK(rdp_epsilon(0, 1.3, 1e-5) == 0.0);
  // More releases always cost more.
  double prev = 0.0;
  for (int t = 1; t <= 16; t *= 2) {
    double e = rdp_epsilon(t, 1.3, 1e-5);
    CHECK(e > prev);
    prev = e;
  }
  CHECK_THROWS_AS(rdp_epsilon(-1, 1.3, 1e-5), std::invalid_argument);
}

TEST_CASE("accountant spends linearly and cuts off at the budget") {
  // Low tier, 100 examples: per-round charge 0.0880873684110071, ceiling 2.0,
  // so exactly 22 releases fit.
  PrivacyAccountant acct(privacy_for(QualityTier::Low), 100);
  CHECK(acct.per_round() == doctest::Approx(0.0880873684110071).epsilon(1e-12));
  int released = 0;
  while (acct.can_release()) {
    acct.record_release();
    ++released;
    REQUIRE(released < 1000);
  }
  CHECK(released == 22);
  CHECK(acct.spent() == doctest::Approx(22 * 0.0880873684110071).epsilon(1e-9));
  CHECK(acct.spent() <= 2.0);
  CHECK_FALSE(acct.can_release());
}

TEST_CASE("accountant refuses immediately when one release busts the ceiling") {
  PrivacyParams tight = privacy_for(QualityTier::Low);
  tight.max_epsilon = 0.01;  // below the per-round charge for 100 examples
  PrivacyAccountant acct(tight, 100);
  CHECK_FALSE(acct.can_release());
  CHECK(acct.spent() == 0.0);
}

TEST_CASE("renyi view lowers the reported spend when it is tighter") {
  // One example and sigma 50: linear charge 0.1937922105 per round. After 100
  // rounds linear says 19.379 while the Renyi optimum is 0.9797, so the
  // accountant with the Renyi view keeps releasing long after the linear one
  // stopped.
  PrivacyParams p{50.0, 2.0, 1e-5, 1.0};
  PrivacyAccountant lin(p, 1, false);
  PrivacyAccountant rdp(p, 1, true);
  for (int t = 0; t < 100; ++t) {
    if (lin.can_release()) lin.record_release();
    REQUIRE(rdp.can_release());
    rdp.record_release();
  }
  CHECK(lin.releases() == 10);  // floor(2.0 / 0.1937922105)
  CHECK(rdp.releases() == 100);
  CHECK(rdp.spent() == doctest::Approx(0.979705227707093).epsilon(1e-12));
  // With few releases the linear sum is smaller and min() keeps it.
  PrivacyAccountant fresh(p, 1, true);
  fresh.record_release();
  CHECK(fresh.spent() == doctest::Approx(0.193792210504216).epsilon(1e-12));
}

TEST_CASE("fixed-point codec is exact on the grid and ties to even") {
  CHECK(float_to_fixed(0.0f) == 0);
  CHECK(float_to_fixed(1.0f) == 65536);
  CHECK(float_to_fixed(-1.0f) == -65536);
  CHECK(float_to_fixed(0.25f) == 16384);
  CHECK(fixed_to_float(16384) == 0.25f);
  CHECK(fixed_to_float(float_to_fixed(-3.5f)) == -3.5f);
  // Halfway cases round to the even neighbour (1.5 -> 2, 2.5 -> 2).
  CHECK(float_to_fixed(1.5f / 65536.0f) == 2);
  CHECK(float_to_fixed(2.5f / 65536.0f) == 2);
  CHECK(float_to_fixed(3.5f / 65536.0f) == 4);
  CHECK(float_to_fixed(-1.5f / 65536.0f) == -2);
  // 40000 * 2^16 overflows the 32-bit ring.
  CHECK_THROWS_AS(float_to_fixed(40000.0f), std::overflow_error);
  CHECK_THROWS_AS(float_to_fixed(-40000.0f), std::overflow_error);
  CHECK(float_to_fixed(30000.0f) == 30000 * 65536);  // still fits
}

TEST_CASE("pairwise masks blind the submission but cancel in the sum") {
  const uint64_t seed = 0xfeedbeef;
  std::vector<int32_t> a = {float_to_fixed(1.0f), float_to_fixed(2.0f)};
  std::vector<int32_t> b = {float_to_fixed(3.0f), float_to_fixed(4.0f)};
  std::vector<uint32_t> sa = masked_submission(seed, 0, 2, a);
  std::vector<uint32_t> sb = masked_submission(seed, 1, 2, b);
  // Each submission individually is garbage (the mask moved it).
  CHECK(sa[0] != static_cast<uint32_t>(a[0]));
  CHECK(sb[0] != static_cast<uint32_t>(b[0]));
  // Added in the ring, the masks vanish exactly.
  CHECK(static_cast<int32_t>(sa[0] + sb[0]) == a[0] + b[0]);
  CHECK(static_cast<int32_t>(sa[1] + sb[1]) == a[1] + b[1]);

  SecureSumResult res = secure_sum({{1.0f, 2.0f}, {3.0f, 4.0f}}, {}, 0.3, seed);
  REQUIRE_FALSE(res.aborted);
  REQUIRE(res.sum.size() == 2);
  CHECK(res.sum[0] == 4.0f);
  CHECK(res.sum[1] == 6.0f);
}

TEST_CASE("decoded sum is bit-exact against the plain fixed-point sum") {
  // Mixed-sign fractional values, 3 of 10 clients dropped (at the 0.3 limit).
  Rng rng(2024);
  const int n = 10;
  const size_t dim = 5;
  std::vector<std::vector<float>> vecs(n, std::vector<float>(dim));
  for (auto& v : vecs)
    for (auto& x : v) x = static_cast<float>(rng.uniform(-8.0, 8.0));
  std::set<int> dropped = {2, 7, 9};

  SecureSumResult res = secure_sum(vecs, dropped, 0.3, 77);
  REQUIRE_FALSE(res.aborted);
  for (size_t k = 0; k < dim; ++k) {
    int64_t plain = 0;
    for (int i = 0; i < n; ++i)
      if (!dropped.count(i)) plain += float_to_fixed(vecs[i][k]);
    CHECK(res.sum[k] == fixed_to_float(static_cast<int32_t>(plain)));
  }

  // The session seed changes every mask yet never the decoded total.
  SecureSumResult other = secure_sum(vecs, dropped, 0.3, 78);
  REQUIRE_FALSE(other.aborted);
  for (size_t k = 0; k < dim; ++k) CHECK(other.sum[k] == res.sum[k]);

  // One more dropout crosses the tolerance and the round aborts.
  dropped.insert(4);
  SecureSumResult aborted = secure_sum(vecs, dropped, 0.3, 77);
  CHECK(aborted.aborted);
  CHECK(aborted.sum.empty());
}

TEST_CASE("masked sum survives randomized dropout up to the tolerance") {
  // 200 rounds with 10..50 clients, 64-dim vectors, 0..40% dropout. Within
  // tolerance the decode must match the plain fixed-point survivor sum
  // bit-exactly; beyond it the round aborts.
  Rng rng(991);
  int recovered = 0, aborted = 0;
  for (int trial = 0; trial < 200; ++trial) {
    int n = 10 + static_cast<int>(rng.below(41));
    const size_t dim = 64;
    std::vector<std::vector<float>> vecs(n, std::vector<float>(dim));
    for (auto& v : vecs)
      for (auto& x : v) x = static_cast<float>(rng.uniform(-8.0, 8.0));
    double frac = rng.uniform(0.0, 0.4);
    int n_drop = static_cast<int>(frac * n);
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) ids[i] = i;
    rng.shuffle(ids);
    std::set<int> dropped(ids.begin(), ids.begin() + n_drop);

    uint64_t session = rng.next_u64();
    SecureSumResult res = secure_sum(vecs, dropped, 0.3, session);
    if (n_drop > 0.3 * n) {
      CHECK(res.aborted);
      ++aborted;
      continue;
    }
    REQUIRE_FALSE(res.aborted);
    ++recovered;
    for (size_t k = 0; k < dim; ++k) {
      int64_t plain = 0;
      for (int i = 0; i < n; ++i)
        if (!dropped.count(i)) plain += float_to_fixed(vecs[i][k]);
      REQUIRE(res.sum[k] == fixed_to_float(static_cast<int32_t>(plain)));
    }
  }
  // Both branches must actually be exercised.
  CHECK(recovered > 100);
  CHECK(aborted > 20);
}

TEST_CASE("single submissions look uniform over the ring") {
  // A lone submission is the value plus a fresh mask, so across session seeds
  // every bit should be an unbiased coin even though the value is constant.
  const size_t dim = 64;
  std::vector<int32_t> value(dim, float_to_fixed(1.0f));
  std::vector<int> ones(32, 0);
  int total = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    std::vector<uint32_t> sub = masked_submission(seed, 0, 2, value);
    for (uint32_t w : sub) {
      for (int b = 0; b < 32; ++b)
        if (w >> b & 1u) ++ones[b];
      ++total;
    }
  }
  for (int b = 0; b < 32; ++b) {
    double freq = static_cast<double>(ones[b]) / total;
    CHECK(freq > 0.45);  // 6400 draws, 0.05 slack is 8 sigma
    CHECK(freq < 0.55);
  }
}

TEST_CASE("secure sum validates its inputs") {
  CHECK_THROWS_AS(secure_sum({}, {}, 0.3, 1), std::invalid_argument);
  CHECK_THROWS_AS(secure_sum({{}, {}}, {}, 0.3, 1), std::invalid_argument);
  CHECK_THROWS_AS(secure_sum({{1.0f}, {1.0f, 2.0f}}, {}, 0.3, 1), std::invalid_argument);
  CHECK_THROWS_AS(secure_sum({{1.0f}, {2.0f}}, {5}, 0.3, 1), std::invalid_argument);
  CHECK_THROWS_AS(secure_sum({{1.0f}, {2.0f}}, {-1}, 0.3, 1), std::invalid_argument);
  CHECK_THROWS_AS(pair_mask(1, 3, 3, 4), std::invalid_argument);
  CHECK_THROWS_AS(pair_mask(1, 4, 3, 4), std::invalid_argument);
  CHECK_THROWS_AS(masked_submission(1, 2, 2, {0}), std::invalid_argument);
  // Individually representable values whose true total overflows the ring.
  CHECK_THROWS_AS(secure_sum({{30000.0f}, {30000.0f}}, {}, 0.3, 1), std::overflow_error);
}
