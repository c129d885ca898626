#include "qahfl/device.hpp"

#include <stdexcept>

namespace qahfl {

const std::array<DeviceProfile, 3>& default_profiles() {
  static const std::array<DeviceProfile, 3> profiles = {{
      {QualityTier::Low, 512, 2, 1.0, 2000, 5.0, 8, 2, 800.0, 0.18},
      {QualityTier::Medium, 2048, 4, 10.0, 3000, 20.0, 16, 3, 1500.0, 0.30},
      {QualityTier::High, 6144, 8, 50.0, 4000, 50.0, 32, 5, 2500.0, 0.40},
  }};
  return profiles;
}

const DeviceProfile& profile_for(QualityTier tier) {
  return default_profiles()[static_cast<size_t>(tier_index(tier))];
}

double battery_impact_pct(double power_mw, double train_time_h, double battery_mah) {
  if (power_mw < 0 || train_time_h < 0) throw std::invalid_argument("battery: negative input");
  if (battery_mah <= 0) throw std::invalid_argument("battery: capacity must be positive");
  // Energy drawn over capacity at the nominal cell voltage, as a percentage.
  return power_mw * train_time_h / (battery_mah * 3.7) * 100.0;
}

double simulate_train_time_s(const DeviceProfile& p, int batches_per_epoch, int epochs) {
  if (batches_per_epoch < 0 || epochs < 0)
    throw std::invalid_argument("simulate_train_time_s: negative count");
  return p.batch_cost_s * batches_per_epoch * epochs;
}

double transfer_time_s(uint64_t bytes, double bandwidth_mbps) {
  if (bandwidth_mbps <= 0) throw std::invalid_argument("transfer_time_s: bandwidth must be positive");
  return 8.0 * static_cast<double>(bytes) / (bandwidth_mbps * 1e6);
}

}  // namespace qahfl
