#pragma once

#include <array>

#include "qahfl/image.hpp"

namespace qahfl {

// Hardware envelope of one device class. Training cost is simulated, not
// measured: batch_cost_s is the nominal wall time of one optimizer step on
// this class of hardware.
struct DeviceProfile {
  QualityTier tier = QualityTier::Low;
  int ram_mb = 0;
  int cpu_cores = 0;
  double bandwidth_mbps = 0.0;
  int battery_mah = 0;
  double max_model_mb = 0.0;
  int max_batch = 0;
  int max_epochs = 0;
  double power_mw = 0.0;     // draw while training
  double batch_cost_s = 0.0; // simulated seconds per optimizer step
};

// Low / medium / high device classes, indexed by tier.
const std::array<DeviceProfile, 3>& default_profiles();
const DeviceProfile& profile_for(QualityTier tier);

// Battery percentage consumed by drawing power_mw for train_time_h hours from
// a battery_mah cell at the nominal 3.7 V.
double battery_impact_pct(double power_mw, double train_time_h, double battery_mah);

// Simulated wall time for a local training run of epochs x batches_per_epoch steps.
double simulate_train_time_s(const DeviceProfile& p, int batches_per_epoch, int epochs);

// Seconds to push `bytes` through the profile's uplink.
double transfer_time_s(uint64_t bytes, double bandwidth_mbps);

}  // namespace qahfl
