#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "qahfl/dataset.hpp"
#include "qahfl/image.hpp"
#include "qahfl/rng.hpp"
#include "qahfl/wire.hpp"

namespace qahfl {

// Per-tier fusion influence. Starts at the configured priors and contracts
// toward the observed tier accuracies round over round, clamped to [0, 1].
struct QualityWeights {
  double low = 0.6;
  double medium = 0.8;
  double high = 1.0;

  double for_tier(QualityTier tier) const;
};

// One step of the adaptive weighting: w ← alpha * w + (1 - alpha) * accuracy
// per tier, clamped to [0, 1]. A tier with no fresh measurement keeps its
// weight by passing the current value back as its accuracy.
QualityWeights update_quality_weights(const QualityWeights& weights,
                                      const std::array<double, 3>& avg_accuracy_by_tier,
                                      double alpha = 0.3);

// What the selector needs to know about one eligible client. Exhausted
// clients are excluded before this point; history points at the client's
// per-round holdout accuracies (empty before the first round).
struct ClientSummary {
  int client_id = -1;
  QualityTier tier = QualityTier::Low;
  size_t data_size = 0;
  const std::vector<double>* history = nullptr;
};

struct ScoreBreakdown {
  int client_id = -1;
  QualityTier tier = QualityTier::Low;
  double perf_ema = 0.0;
  double data_term = 0.0;
  double trend = 0.0;
  double diversity_bonus = 0.0;
  double total = 0.0;
};

struct SelectionRecord {
  int round = 0;
  std::vector<ScoreBreakdown> scores;  // one per eligible client, input order
  std::vector<int> selected;           // client ids, descending score order
};

// Picks ceil(fraction * eligible) clients. Round one is a uniform random
// draw; later rounds score each client as
//   0.4 * EMA(history, decay 0.5) + 0.2 * size/max_size
//   + 0.2 * clamp(last - previous + 0.5) + 0.2 * diversity_bonus
// where the diversity bonus lifts clients of tiers whose mean EMA trails the
// best tier (1 - tier_ema/best_tier_ema), keeping weak device types
// represented in score space; with equal histories every term but data size
// cancels. After scoring, any tier with eligible clients but no selection
// gets its best client swapped in for the lowest-scoring pick.
// Throws std::invalid_argument on an empty eligible set or bad fraction.
SelectionRecord select_clients(const std::vector<ClientSummary>& eligible, int round,
                               double fraction, Rng& rng);

// The fusion model: one linear projection per tier into the shared fusion
// space and a two-layer head on top.
//   logits = head2( relu( head1( w_tier * P_tier(features) ) ) )
// A sample carries features from exactly one tier, so the fused vector is
// that tier's weighted projection with the other tiers contributing zero.
class ServerModel {
 public:
  static constexpr int kFusionDim = 64;
  static constexpr int kClasses = 10;

  // He-style init from the given stream; biases start at zero.
  explicit ServerModel(Rng& init);

  std::vector<float>& params() { return params_; }
  const std::vector<float>& params() const { return params_; }

  // Input width of one tier's projection (16/32/64).
  static int tier_dim(QualityTier tier);

  // The pre-head fused vector w_tier * (P_tier features + bias); scales
  // exactly linearly in the tier weight.
  std::vector<float> project(const std::vector<float>& features, QualityTier tier,
                             double tier_weight) const;

  // Full forward for one sample: logits over the ten classes.
  // Throws std::invalid_argument when the feature width does not match the tier.
  std::vector<float> fuse(const std::vector<float>& features, QualityTier tier,
                          const QualityWeights& weights) const;

 private:
  std::vector<float> params_;
};

struct ServerTrainMetrics {
  std::vector<double> epoch_loss;  // mean weighted loss per epoch
  size_t n_samples = 0;
};

// Distillation training on the round's feature uploads. Entries are
// dequantized, each sample's loss is scaled by its tier's quality weight, and
// with a teacher the objective becomes
//   (1 - kd_alpha) * CE + kd_alpha * T^2 * KL(teacher_softmax(T) || student_softmax(T));
// the teacher (last round's frozen model) is evaluated through the same
// quality weights. Plain weighted CE when teacher is null. Skipped or empty
// packets are ignored; throws std::invalid_argument when nothing remains.
ServerTrainMetrics train_server(ServerModel& model, const std::vector<FeaturePacket>& packets,
                                const QualityWeights& weights, const ServerModel* teacher,
                                double kd_alpha = 0.5, double temperature = 2.0, int epochs = 5,
                                int batch = 64, double lr = 0.01, double momentum = 0.9,
                                Rng* rng = nullptr);

// theta_t + beta * (theta_t - theta_prev), elementwise; the server's
// round-over-round extrapolation. Throws std::invalid_argument on shape
// mismatch.
std::vector<float> apply_momentum(const std::vector<float>& theta_t,
                                  const std::vector<float>& theta_prev, double beta = 0.9);

// Evaluation-side stand-in for one tier's feature extractor: the
// parameter-space mean of the tier's selected clients' backbones (buffers
// carry the batch-norm statistics).
struct EvalExtractor {
  bool present = false;
  std::vector<float> params;
  std::vector<float> buffers;
};

// Central accuracy: every test image is degraded per tier, passed through
// that tier's extractor to features, fused, and the per-tier logits summed;
// argmax of the sum is the vote. Tiers without an extractor contribute
// nothing. The rng drives the per-tier degradations. Throws
// std::invalid_argument when no extractor is present or the test set is empty.
double evaluate_server(const ServerModel& model, const QualityWeights& weights,
                       const std::vector<LabeledExample>& test_set,
                       const std::array<EvalExtractor, 3>& extractors, Rng& rng,
                       const DegradeParams& degrade_params = {});

}  // namespace qahfl
