#include "qahfl/client.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "qahfl/models.hpp"
#include "qahfl/serialize.hpp"

namespace qahfl {

namespace {

ClientDataset checked_dataset(ClientDataset ds) {
  if (ds.examples.size() < 2)
    throw std::invalid_argument("ClientState: need at least two local examples");
  return ds;
}

// Copies the examples at idx[start, start+count) into a flat batch buffer.
void pack_batch(const std::vector<LabeledExample>& examples, const std::vector<size_t>& idx,
                size_t start, size_t count, size_t volume, std::vector<float>* x,
                std::vector<int>* y) {
  x->resize(count * volume);
  y->resize(count);
  for (size_t i = 0; i < count; ++i) {
    const LabeledExample& ex = examples[idx[start + i]];
    if (ex.image.pix.size() != volume)
      throw std::invalid_argument("client: image size does not match the model input");
    for (size_t j = 0; j < volume; ++j)
      (*x)[i * volume + j] = static_cast<float>(ex.image.pix[j]);
    (*y)[i] = ex.label;
  }
}

double holdout_accuracy(ClientState& s) {
  size_t volume = static_cast<size_t>(s.net.spec().input_h) * s.net.spec().input_w *
                  s.net.spec().input_ch;
  size_t batch = static_cast<size_t>(s.profile.max_batch);
  std::vector<float> x;
  std::vector<int> y;
  std::vector<float> logits;
  int n_classes = s.net.spec().n_classes;
  size_t hits = 0;
  for (size_t start = 0; start < s.holdout_idx.size(); start += batch) {
    size_t count = std::min(batch, s.holdout_idx.size() - start);
    pack_batch(s.dataset.examples, s.holdout_idx, start, count, volume, &x, &y);
    s.net.forward(x.data(), static_cast<int>(count), false, nullptr, nullptr, &logits);
    for (size_t i = 0; i < count; ++i) {
      const float* row = logits.data() + i * n_classes;
      int best = static_cast<int>(std::max_element(row, row + n_classes) - row);
      if (best == y[i]) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(s.holdout_idx.size());
}

}  // namespace

PrivacyParams PrivacyConfig::params(QualityTier tier) const {
  return quality_calibrated ? privacy_for(tier) : uniform_privacy();
}

double CompressionTargets::for_tier(QualityTier tier) const {
  switch (tier) {
    case QualityTier::Low: return low;
    case QualityTier::Medium: return medium;
    default: return high;
  }
}

ClientState::ClientState(ClientDataset ds, const PrivacyConfig& privacy, uint64_t init_seed)
    : dataset(checked_dataset(std::move(ds))),
      profile(profile_for(dataset.tier)),
      net(make_tier_spec(dataset.tier)),
      accountant(privacy.params(dataset.tier), dataset.size(), privacy.use_rdp) {
  double model_mb = static_cast<double>(serialized_size_bytes(net.spec())) / (1 << 20);
  if (model_mb > profile.max_model_mb)
    throw std::runtime_error("ClientState: model does not fit the device budget");

  // Parameters come from a stream shared by every client of the tier (the
  // caller passes one init_seed per tier), so parameter-space averaging stays
  // meaningful. The holdout split is the client's own.
  Rng init = SeedTree(init_seed).child("params").rng();
  net.init_params(init);
  prev_params = net.params();

  size_t n = dataset.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split =
      SeedTree(init_seed).child("split").child(static_cast<uint64_t>(dataset.client_id)).rng();
  split.shuffle(order);
  size_t n_hold = std::clamp<size_t>(static_cast<size_t>(std::lround(0.2 * n)), 1, n - 1);
  holdout_idx.assign(order.begin(), order.begin() + n_hold);
  train_idx.assign(order.begin() + n_hold, order.end());
}

LocalTrainResult local_train(ClientState& s, int round_idx, const std::array<double, 3>& mu_by_tier,
                             Rng& rng, double lr, double momentum) {
  const ModelSpec& spec = s.net.spec();
  size_t volume = static_cast<size_t>(spec.input_h) * spec.input_w * spec.input_ch;
  size_t batch = static_cast<size_t>(s.profile.max_batch);
  int epochs = s.profile.max_epochs;
  // The proximal pull starts in round two; round one has nothing to pull to.
  float mu = round_idx > 1 ? static_cast<float>(mu_by_tier[tier_index(s.dataset.tier)]) : 0.0f;
  float lambda = static_cast<float>(tier_training(s.dataset.tier).l2);

  s.prev_params = s.net.params();
  std::vector<float> velocity(s.net.params().size(), 0.0f);
  std::vector<float> grad(s.net.params().size());
  std::vector<float> x, logits, dlogits;
  std::vector<int> y;
  typename Net<float>::Flow flow;

  std::vector<size_t> order = s.train_idx;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += batch) {
      size_t count = std::min(batch, order.size() - start);
      pack_batch(s.dataset.examples, order, start, count, volume, &x, &y);
      s.net.forward(x.data(), static_cast<int>(count), true, &rng, &flow, &logits);
      softmax_ce<float>(logits, static_cast<int>(count), spec.n_classes, y.data(), &dlogits);
      std::fill(grad.begin(), grad.end(), 0.0f);
      s.net.backward(flow, dlogits, &grad);
      add_penalty_grads<float>(s.net.params(), s.prev_params, mu, lambda, &grad);
      sgd_momentum_step(s.net.params(), grad, velocity, static_cast<float>(lr),
                        static_cast<float>(momentum));
    }
  }

  // A couple of epochs moves the parameters much faster than the batch-norm
  // EMA tracks them, and everything downstream (holdout accuracy, feature
  // extraction, the server-side eval extractors) consumes eval-mode forwards.
  // Re-measure the statistics under the final parameters before any of that.
  pack_batch(s.dataset.examples, s.train_idx, 0, s.train_idx.size(), volume, &x, &y);
  s.net.refresh_stats(x.data(), static_cast<int>(s.train_idx.size()), static_cast<int>(batch));

  LocalTrainResult out;
  out.accuracy = holdout_accuracy(s);
  s.history.push_back(out.accuracy);

  int batches_per_epoch = static_cast<int>((s.train_idx.size() + batch - 1) / batch);
  out.report.train_time_s = simulate_train_time_s(s.profile, batches_per_epoch, epochs);
  out.report.battery_pct = battery_impact_pct(s.profile.power_mw, out.report.train_time_s / 3600.0,
                                              s.profile.battery_mah);
  size_t peak_act = volume;
  for (const LayerLayout& l : s.net.layout())
    peak_act = std::max(peak_act, static_cast<size_t>(l.out_c) * l.out_h * l.out_w);
  double bytes = static_cast<double>(serialized_size_bytes(spec)) +
                 4.0 * static_cast<double>(batch) * static_cast<double>(peak_act);
  out.report.peak_memory_mb = bytes / (1 << 20);
  return out;
}

FeaturePacket extract_features(ClientState& s, int round_idx, const PrivacyConfig& privacy,
                               Rng& rng) {
  const ModelSpec& spec = s.net.spec();
  int dim = spec.feature_dim;
  uint32_t id = static_cast<uint32_t>(s.dataset.client_id);
  uint16_t round = static_cast<uint16_t>(round_idx);

  if (privacy.enabled && !s.accountant.can_release()) {
    FeaturePacket skip(id, round, s.dataset.tier, dim, {}, {}, privacy.enabled, true);
    skip.skipped = true;
    return skip;
  }

  size_t volume = static_cast<size_t>(spec.input_h) * spec.input_w * spec.input_ch;
  size_t n = s.dataset.size();
  size_t batch = static_cast<size_t>(s.profile.max_batch);
  std::vector<size_t> all(n);
  std::iota(all.begin(), all.end(), 0);

  std::vector<float> features(n * dim);
  std::vector<uint8_t> labels(n);
  std::vector<float> x, logits, feats;
  std::vector<int> y;
  for (size_t start = 0; start < n; start += batch) {
    size_t count = std::min(batch, n - start);
    pack_batch(s.dataset.examples, all, start, count, volume, &x, &y);
    s.net.forward(x.data(), static_cast<int>(count), false, nullptr, nullptr, &logits, &feats);
    std::copy(feats.begin(), feats.end(), features.begin() + start * dim);
    for (size_t i = 0; i < count; ++i) labels[start + i] = static_cast<uint8_t>(y[i]);
  }

  double eps = 0.0;
  if (privacy.enabled) {
    const PrivacyParams& p = s.accountant.params();
    for (size_t i = 0; i < n; ++i) {
      float* row = features.data() + i * dim;
      clip_l2(row, dim, p.clip_norm);
      gaussian_mechanism(row, dim, p.sigma, p.clip_norm, rng);
    }
    eps = s.accountant.per_round();
    s.accountant.record_release();
  }

  FeaturePacket packet(id, round, s.dataset.tier, dim, std::move(features), std::move(labels),
                       privacy.enabled, privacy.enabled);
  packet.eps_spent = eps;
  return packet;
}

void compress(FeaturePacket& packet, const CompressionTargets& targets, Rng& rng,
              double round_multiplier) {
  double target = std::min(1.0, targets.for_tier(packet.tier) * round_multiplier);
  compress_packet(packet, target, rng);
}

}  // namespace qahfl
