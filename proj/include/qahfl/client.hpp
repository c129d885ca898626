#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "qahfl/dataset.hpp"
#include "qahfl/device.hpp"
#include "qahfl/nn.hpp"
#include "qahfl/privacy.hpp"
#include "qahfl/wire.hpp"

namespace qahfl {

// How the client pipeline applies differential privacy. Disabled, feature
// uploads go out raw; enabled, every vector is clipped and noised and the
// per-client accountant enforces the budget ceiling.
struct PrivacyConfig {
  bool enabled = false;
  bool quality_calibrated = true;  // per-tier calibration; false = one uniform level
  bool use_rdp = false;            // accountant reports the tighter composition view

  PrivacyParams params(QualityTier tier) const;
};

// Per-tier upload budget as a fraction of the raw float32 packet size.
// 1.0 everywhere means raw uploads.
struct CompressionTargets {
  double low = 0.05;
  double medium = 0.10;
  double high = 0.20;

  double for_tier(QualityTier tier) const;
};

// Simulated cost of one local round on the client's device class.
struct ResourceReport {
  double train_time_s = 0.0;
  double battery_pct = 0.0;
  double peak_memory_mb = 0.0;  // model plus the largest activation, at max_batch
  uint64_t bytes_up = 0;        // filled in once the upload packet is final
};

// One federated client: its data shard, device class, backbone net, privacy
// ledger, and a seeded 80/20 split for measuring local accuracy.
// Construction enforces the device admission gate (the serialized model must
// fit max_model_mb) and initializes parameters from init_seed. Clients of the
// same tier must be given the same init_seed so their parameter spaces stay
// aligned; the holdout split still differs per client.
struct ClientState {
  ClientDataset dataset;
  DeviceProfile profile;
  Net<float> net;
  std::vector<float> prev_params;   // parameters at the start of the last local run
  std::vector<double> history;      // local holdout accuracy per round
  PrivacyAccountant accountant;
  std::vector<size_t> train_idx;    // 80% of the shard, trained on
  std::vector<size_t> holdout_idx;  // 20%, evaluated on

  ClientState(ClientDataset ds, const PrivacyConfig& privacy, uint64_t init_seed);
};

struct LocalTrainResult {
  double accuracy = 0.0;  // on the client's holdout split
  ResourceReport report;
};

// One round of local training: max_epochs passes of minibatch SGD with
// momentum at the device's max_batch, minimizing cross entropy plus the
// tier's weight decay plus a proximal pull toward the round's starting
// parameters. The proximal term switches on from the second round. Returns
// holdout accuracy (also appended to state.history) and the simulated cost.
LocalTrainResult local_train(ClientState& state, int round_idx,
                             const std::array<double, 3>& mu_by_tier, Rng& rng, double lr = 0.01,
                             double momentum = 0.9);

// Runs the trained backbone in eval mode over every local example and packages
// the feature-tap outputs with their labels. With privacy enabled each vector
// is clipped to the tier's L2 bound and noised by the Gaussian mechanism, the
// accountant is charged one release, and eps_spent reports that charge; when
// the budget cannot cover another release the client skips (empty packet,
// skipped flag set, nothing charged). Labels are never perturbed: the privacy
// guarantee covers feature values only.
FeaturePacket extract_features(ClientState& state, int round_idx, const PrivacyConfig& privacy,
                               Rng& rng);

// Compresses the packet toward its tier's target ratio scaled by
// round_multiplier (capped at 1.0, so a multiplier of 1 with target 1 keeps
// the upload raw).
void compress(FeaturePacket& packet, const CompressionTargets& targets, Rng& rng,
              double round_multiplier = 1.0);

}  // namespace qahfl
