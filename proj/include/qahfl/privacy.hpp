#pragma once

#include <cstddef>
#include <vector>

#include "qahfl/image.hpp"
#include "qahfl/rng.hpp"

namespace qahfl {

// Differential privacy calibration for one device tier: Gaussian noise scale,
// the budget ceiling a client may spend across rounds, and the L2 bound
// features are clipped to before noising.
struct PrivacyParams {
  double sigma = 1.3;
  double max_epsilon = 2.0;
  double delta = 1e-5;
  double clip_norm = 1.0;
};

// Quality-calibrated defaults: richer features leak more, so noise rises with
// tier quality while the spend ceiling loosens (low-end clients run out of
// budget first).
PrivacyParams privacy_for(QualityTier tier);

// Ablation setting that ignores quality: every tier gets the mid noise scale
// and the tightest ceiling.
PrivacyParams uniform_privacy();

// Scales v down so its L2 norm is at most clip_norm; shorter vectors pass
// through. Returns the factor applied (1 when untouched).
double clip_l2(float* v, size_t n, double clip_norm);
double clip_l2(std::vector<float>& v, double clip_norm);

// Adds independent N(0, (sigma * clip_norm)^2) to every coordinate: the
// Gaussian mechanism for an L2 sensitivity of clip_norm.
void gaussian_mechanism(float* v, size_t n, double sigma, double clip_norm, Rng& rng);
void gaussian_mechanism(std::vector<float>& v, double sigma, double clip_norm, Rng& rng);

// Privacy cost of releasing one round of features extracted from a dataset of
// n examples: 2 * sqrt(2 * ln(1.25 / delta)) / (n * sigma). Larger shards
// dilute the per-example exposure, so the charge shrinks with n.
double per_round_epsilon(size_t n, double sigma, double delta);

// Epsilon of `rounds` composed Gaussian releases with noise multiplier sigma,
// through Renyi divergence: min over an alpha grid (1.25 to 64, step 0.25) of
// rounds * alpha / (2 sigma^2) + ln(1/delta) / (alpha - 1). Tighter than the
// linear sum once rounds pile up against a large sigma.
double rdp_epsilon(int rounds, double sigma, double delta);

// Tracks one client's cumulative spend. Linear composition of the per-round
// charge by default; with use_rdp the reported spend is the smaller of the
// linear and Renyi views.
class PrivacyAccountant {
 public:
  PrivacyAccountant(const PrivacyParams& params, size_t dataset_size, bool use_rdp = false);

  // Whether one more release still fits under max_epsilon.
  bool can_release() const;
  // Records one release and returns the new cumulative epsilon.
  double record_release();

  double spent() const { return spent_after(releases_); }
  double per_round() const { return per_round_; }
  int releases() const { return releases_; }
  const PrivacyParams& params() const { return params_; }

 private:
  double spent_after(int releases) const;

  PrivacyParams params_;
  double per_round_ = 0.0;
  bool use_rdp_ = false;
  int releases_ = 0;
};

}  // namespace qahfl
