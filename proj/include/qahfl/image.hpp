#pragma once

#include <array>
#include <string>
#include <vector>

#include "qahfl/rng.hpp"

namespace qahfl {

// Device capture quality classes, ordered worst to best.
enum class QualityTier { Low = 0, Medium = 1, High = 2 };

constexpr std::array<QualityTier, 3> kAllTiers = {QualityTier::Low, QualityTier::Medium,
                                                  QualityTier::High};

inline int tier_index(QualityTier t) { return static_cast<int>(t); }
const char* tier_name(QualityTier t);
QualityTier tier_from_name(const std::string& name);

// Grayscale image, row-major, intensities in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pix;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pix(static_cast<size_t>(h) * w, 0.0) {}

  double& at(int y, int x) { return pix[static_cast<size_t>(y) * width + x]; }
  double at(int y, int x) const { return pix[static_cast<size_t>(y) * width + x]; }
};

// Area-average downscale by `factor` in (0, 1], then bilinear upscale back to
// the original size. Models resolution loss of a cheap sensor.
Image downscale_upscale(const Image& img, double factor);

// Separable gaussian blur, kernel radius ceil(3*sigma), kernel renormalized
// where it overhangs the border. sigma <= 0 returns a copy.
Image gaussian_blur(const Image& img, double sigma);

// Codec-style artifacts: orthonormal 4x4 block DCT, uniform quantization of
// the coefficients with the given step, inverse transform. Edges are padded
// by replication when dimensions are not multiples of 4.
Image compression_artifacts(const Image& img, double quant_step);

// Additive iid gaussian pixel noise, output clipped back to [0, 1].
Image add_gaussian_noise(const Image& img, double sigma, Rng& rng);

// Per-tier degradation settings. Defaults model the three capture classes:
// low applies downscale, blur, codec artifacts and strong noise; medium a
// milder downscale, blur and noise; high is passthrough.
struct DegradeParams {
  double low_scale = 0.25;
  double low_blur_sigma = 1.5;
  double low_quant_step = 0.5;
  double low_noise_sigma = 0.15;

  double med_scale = 0.5;
  double med_blur_sigma = 0.8;
  double med_noise_sigma = 0.08;

  double high_noise_sigma = 0.0;  // high tier is clean by default
};

// Applies the full degradation chain for one tier.
Image degrade(const Image& img, QualityTier tier, Rng& rng, const DegradeParams& p = {});

// Peak signal-to-noise ratio in dB against peak 1.0. Returns +infinity for
// identical images. Throws std::invalid_argument on dimension mismatch.
double psnr(const Image& reference, const Image& test);

}  // namespace qahfl
