#pragma once

#include "qahfl/nn.hpp"

namespace qahfl {

// Per-tier training hyperparameters that travel with the architecture.
struct TierTraining {
  double mu = 0.0;        // proximal strength
  double l2 = 0.0;        // weight decay
  double dropout = 0.0;   // head dropout rate
};

// The backbone for one device class. Capacity scales with the tier:
// a tiny two-conv net for low, a residual net for medium, and a wider
// two-block residual net with channel gating for high. All three expose a
// feature tap right after global average pooling.
ModelSpec make_tier_spec(QualityTier tier);

TierTraining tier_training(QualityTier tier);

// Feature width at the tap, by tier: 16 / 32 / 64.
int tier_feature_dim(QualityTier tier);

// Small fully-connected probe used by unit tests.
ModelSpec make_dense_probe(int in_dim, int hidden, int n_classes);

}  // namespace qahfl
