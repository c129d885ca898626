#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "qahfl/image.hpp"
#include "qahfl/rng.hpp"

namespace qahfl {

struct LabeledExample {
  Image image;
  int label = 0;
};

// Raised by the IDX loader; kind tells the caller what was wrong with the file.
struct IdxError : std::runtime_error {
  enum class Kind { OpenFailed, BadMagic, Truncated, CountMismatch, BadValue };
  Kind kind;
  IdxError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// Loads an MNIST-format IDX image/label file pair, scaling pixels to [0, 1].
// limit = 0 loads everything.
std::vector<LabeledExample> load_mnist_idx(const std::string& images_path,
                                           const std::string& labels_path, size_t limit = 0);

// Deterministic stand-in corpus: handwritten-style digit glyphs built from
// jittered line and curve strokes, rasterized with soft antialiased edges.
// Labels cycle 0..9 so every class is always present. Lets the whole pipeline
// run with no dataset on disk.
std::vector<LabeledExample> synth_digits(size_t n, Rng& rng);

struct TierFractions {
  double low = 0.3;
  double medium = 0.4;
  double high = 0.3;
};

struct ClientDataset {
  int client_id = -1;
  QualityTier tier = QualityTier::Low;
  std::vector<LabeledExample> examples;  // already degraded to the client's tier
  std::vector<int> primary_classes;
  size_t size() const { return examples.size(); }
};

struct PlanConfig {
  int n_clients = 20;
  TierFractions fractions;
  double primary_share = 0.8;    // fraction of a client's data drawn from its primary classes
  int primary_classes = 3;       // distinct primary classes per client
  int size_min = 240;
  int size_max = 500;
  bool apply_degrade = true;
  // When false (ablation), each image is degraded to a random tier instead of
  // the owning client's tier, so quality no longer aligns with the partition.
  bool tier_matched_degrade = true;
  DegradeParams degrade;
};

struct FederationPlan {
  std::vector<ClientDataset> clients;
  uint64_t seed = 0;
  double gini = 0.0;                          // inequality of the client x class count matrix
  std::array<int, 3> tier_counts{};           // clients per tier
  std::array<double, 3> tier_psnr_mean{};     // degraded vs original; +inf for identity tiers
};

// Partitions `examples` into non-IID client shards and applies per-tier
// degradation. Deterministic given the seed. Throws std::invalid_argument on
// bad settings or when there are too few examples for n_clients * size_min.
FederationPlan make_plan(const std::vector<LabeledExample>& examples, const PlanConfig& cfg,
                         uint64_t master_seed);

// Gini coefficient of a non-negative value vector: sum of absolute pairwise
// differences over 2 n^2 mean. Zero for uniform input, (n-1)/n at one-hot.
double gini_of_counts(const std::vector<double>& values);

}  // namespace qahfl
