#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "qahfl/image.hpp"

using namespace qahfl;

namespace {

Image constant(int h, int w, double v) {
  Image img(h, w);
  for (double& p : img.pix) p = v;
  return img;
}

Image checkerboard(int h, int w) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(y, x) = ((x + y) % 2 == 0) ? 0.0 : 1.0;
  return img;
}

// Random image with spatial structure so degradations have something to destroy.
Image blobs(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (double& p : img.pix) p = rng.uniform();
  return gaussian_blur(img, 1.0);
}

double mean_of(const Image& img) {
  double s = 0.0;
  for (double v : img.pix) s += v;
  return s / img.pix.size();
}

double var_of(const Image& img) {
  double m = mean_of(img), s = 0.0;
  for (double v : img.pix) s += (v - m) * (v - m);
  return s / img.pix.size();
}

}  // namespace

TEST_CASE("psnr of a 0.1 uniform offset is exactly 20 dB") {
  Image a = constant(28, 28, 0.0);
  Image b = constant(28, 28, 0.1);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
}

TEST_CASE("psnr of identical images is +infinity") {
  Image a = blobs(28, 28, 3);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, a) > 0);
}

TEST_CASE("psnr rejects mismatched dimensions") {
  CHECK_THROWS_AS(psnr(constant(28, 28, 0.0), constant(14, 28, 0.0)), std::invalid_argument);
}

TEST_CASE("half-factor resample of a checkerboard is exactly flat gray") {
  // 2x2 area averaging collapses the alternating pattern to 0.5 everywhere,
  // and bilinear upscale of a constant stays constant.
  Image out = downscale_upscale(checkerboard(28, 28), 0.5);
  for (double v : out.pix) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("resample preserves constants and validates its factor") {
  Image out = downscale_upscale(constant(28, 28, 0.37), 0.25);
  for (double v : out.pix) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  CHECK_THROWS_AS(downscale_upscale(constant(4, 4, 0.0), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(downscale_upscale(constant(4, 4, 0.0), 1.5), std::invalid_argument);
}

TEST_CASE("blur impulse response matches the truncated gaussian kernel") {
  Image impulse(15, 15);
  impulse.at(7, 7) = 1.0;
  Image out = gaussian_blur(impulse, 0.8);
  // radius ceil(3*0.8) = 3; center weight of the normalized 1-D kernel is
  // 1 / (1 + 2(e^{-1/1.28} + e^{-4/1.28} + e^{-9/1.28})) = 0.4986764, and the
  // separable 2-D center response is its square.
  CHECK(out.at(7, 7) == doctest::Approx(0.2486782).epsilon(2e-6));
  // Energy is conserved away from borders.
  CHECK(mean_of(out) * 15 * 15 == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("blur keeps constants fixed and reduces noise variance") {
  Image flat = gaussian_blur(constant(20, 20, 0.42), 1.5);
  for (double v : flat.pix) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));

  Rng rng(17);
  Image noisy(28, 28);
  for (double& p : noisy.pix) p = rng.uniform();
  Image smooth = gaussian_blur(noisy, 1.0);
  CHECK(var_of(smooth) < 0.5 * var_of(noisy));

  // sigma <= 0 is a passthrough.
  Image same = gaussian_blur(noisy, 0.0);
  CHECK(same.pix == noisy.pix);
}

TEST_CASE("codec artifacts on a constant image quantize only the DC term") {
  // A constant 0.3 block has DC coefficient 4*0.3 = 1.2; with step 0.5 it
  // rounds to 1.0 and reconstructs each pixel as exactly 0.25.
  Image out = compression_artifacts(constant(28, 28, 0.3), 0.5);
  for (double v : out.pix) CHECK(v == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("codec artifact error on constant inputs is bounded by step/8") {
  for (double c : {0.1, 0.33, 0.5, 0.77, 0.9}) {
    for (double step : {0.1, 0.25, 0.5}) {
      Image out = compression_artifacts(constant(23, 19, c), step);  // non-multiple-of-4 dims
      for (double v : out.pix) CHECK(std::abs(v - c) <= step / 8.0 + 1e-12);
    }
  }
}

TEST_CASE("codec artifacts with zero step are a passthrough") {
  Image a = blobs(28, 28, 5);
  Image out = compression_artifacts(a, 0.0);
  CHECK(out.pix == a.pix);
}

TEST_CASE("gaussian noise has the requested scale and stays in range") {
  Rng rng(23);
  Image base = constant(28, 28, 0.5);
  double sq = 0.0;
  int count = 0;
  for (int rep = 0; rep < 50; ++rep) {
    Image noisy = add_gaussian_noise(base, 0.15, rng);
    for (size_t i = 0; i < noisy.pix.size(); ++i) {
      REQUIRE(noisy.pix[i] >= 0.0);
      REQUIRE(noisy.pix[i] <= 1.0);
      double d = noisy.pix[i] - 0.5;
      sq += d * d;
      ++count;
    }
  }
  CHECK(std::sqrt(sq / count) == doctest::Approx(0.15).epsilon(0.05));
}

TEST_CASE("noise is reproducible from the stream and zero sigma is identity") {
  Image base = blobs(28, 28, 9);
  Rng a(31), b(31);
  Image n1 = add_gaussian_noise(base, 0.1, a);
  Image n2 = add_gaussian_noise(base, 0.1, b);
  CHECK(n1.pix == n2.pix);
  Rng c(31);
  Image same = add_gaussian_noise(base, 0.0, c);
  CHECK(same.pix == base.pix);
}

TEST_CASE("degradation severity orders the tiers") {
  double low_sum = 0.0, med_sum = 0.0;
  for (int i = 0; i < 10; ++i) {
    Image orig = blobs(28, 28, 100 + i);
    Rng r1(500 + i), r2(600 + i), r3(700 + i);
    double p_low = psnr(orig, degrade(orig, QualityTier::Low, r1));
    double p_med = psnr(orig, degrade(orig, QualityTier::Medium, r2));
    double p_high = psnr(orig, degrade(orig, QualityTier::High, r3));
    CHECK(std::isinf(p_high));  // default high tier is untouched
    low_sum += p_low;
    med_sum += p_med;
  }
  CHECK(low_sum / 10 < med_sum / 10);
}

TEST_CASE("medium degradation of flat gray is pure noise at sigma 0.08") {
  // Resample and blur leave a constant untouched, so the PSNR is determined
  // by the noise alone: 10*log10(1/0.08^2) = 21.94 dB.
  Image base = constant(28, 28, 0.5);
  double sum = 0.0;
  for (int i = 0; i < 20; ++i) {
    Rng rng(800 + i);
    sum += psnr(base, degrade(base, QualityTier::Medium, rng));
  }
  CHECK(sum / 20 == doctest::Approx(21.94).epsilon(0.03));
}

TEST_CASE("tier names round-trip") {
  for (QualityTier t : kAllTiers) CHECK(tier_from_name(tier_name(t)) == t);
  CHECK(tier_from_name("mid") == QualityTier::Medium);
  CHECK_THROWS_AS(tier_from_name("ultra"), std::invalid_argument);
  CHECK(tier_index(QualityTier::Low) == 0);
  CHECK(tier_index(QualityTier::High) == 2);
}
