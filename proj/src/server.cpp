#include "qahfl/server.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "qahfl/models.hpp"

namespace qahfl {

namespace {

// Flat layout of the fusion model parameters. Projections first (weights then
// bias each), then the two head layers.
constexpr int kDimLow = 16, kDimMid = 32, kDimHigh = 64;
constexpr int kF = ServerModel::kFusionDim;
constexpr int kC = ServerModel::kClasses;

constexpr size_t kProjLowW = 0;
constexpr size_t kProjLowB = kProjLowW + static_cast<size_t>(kF) * kDimLow;
constexpr size_t kProjMidW = kProjLowB + kF;
constexpr size_t kProjMidB = kProjMidW + static_cast<size_t>(kF) * kDimMid;
constexpr size_t kProjHighW = kProjMidB + kF;
constexpr size_t kProjHighB = kProjHighW + static_cast<size_t>(kF) * kDimHigh;
constexpr size_t kHead1W = kProjHighB + kF;
constexpr size_t kHead1B = kHead1W + static_cast<size_t>(kF) * kF;
constexpr size_t kHead2W = kHead1B + kF;
constexpr size_t kHead2B = kHead2W + static_cast<size_t>(kC) * kF;
constexpr size_t kParamCount = kHead2B + kC;

size_t proj_w_offset(QualityTier t) {
  switch (t) {
    case QualityTier::Low: return kProjLowW;
    case QualityTier::Medium: return kProjMidW;
    default: return kProjHighW;
  }
}

size_t proj_b_offset(QualityTier t) {
  switch (t) {
    case QualityTier::Low: return kProjLowB;
    case QualityTier::Medium: return kProjMidB;
    default: return kProjHighB;
  }
}

// One dequantized training sample from a packet.
struct Sample {
  QualityTier tier = QualityTier::Low;
  std::vector<float> feat;
  int label = 0;
};

// Activations of one sample's forward pass, kept for the backward sweep.
struct Trace {
  std::vector<float> z;     // weighted projection, kF
  std::vector<float> h1;    // head hidden after relu, kF
  std::vector<float> mask;  // relu mask, kF
};

void forward_sample(const std::vector<float>& p, const Sample& s, double w_tier, Trace* tr,
                    std::vector<float>* logits) {
  int d = ServerModel::tier_dim(s.tier);
  const float* pw = p.data() + proj_w_offset(s.tier);
  const float* pb = p.data() + proj_b_offset(s.tier);
  std::vector<float> z(kF);
  for (int i = 0; i < kF; ++i) {
    float acc = pb[i];
    const float* row = pw + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) acc += row[j] * s.feat[j];
    z[i] = static_cast<float>(w_tier) * acc;
  }
  std::vector<float> h1(kF), mask(kF);
  const float* w1 = p.data() + kHead1W;
  const float* b1 = p.data() + kHead1B;
  for (int i = 0; i < kF; ++i) {
    float acc = b1[i];
    const float* row = w1 + static_cast<size_t>(i) * kF;
    for (int j = 0; j < kF; ++j) acc += row[j] * z[j];
    mask[i] = acc > 0.0f ? 1.0f : 0.0f;
    h1[i] = acc > 0.0f ? acc : 0.0f;
  }
  logits->assign(kC, 0.0f);
  const float* w2 = p.data() + kHead2W;
  const float* b2 = p.data() + kHead2B;
  for (int i = 0; i < kC; ++i) {
    float acc = b2[i];
    const float* row = w2 + static_cast<size_t>(i) * kF;
    for (int j = 0; j < kF; ++j) acc += row[j] * h1[j];
    (*logits)[i] = acc;
  }
  if (tr) {
    tr->z = std::move(z);
    tr->h1 = std::move(h1);
    tr->mask = std::move(mask);
  }
}

// Adds this sample's parameter gradients given dlogits (already carrying the
// quality weight and the 1/batch factor).
void backward_sample(const std::vector<float>& p, const Sample& s, double w_tier, const Trace& tr,
                     const std::vector<float>& dlogits, std::vector<float>* grad) {
  float* g = grad->data();
  const float* w2 = p.data() + kHead2W;
  std::vector<float> dh1(kF, 0.0f);
  for (int i = 0; i < kC; ++i) {
    float dl = dlogits[i];
    float* gw2 = g + kHead2W + static_cast<size_t>(i) * kF;
    const float* row = w2 + static_cast<size_t>(i) * kF;
    for (int j = 0; j < kF; ++j) {
      gw2[j] += dl * tr.h1[j];
      dh1[j] += dl * row[j];
    }
    g[kHead2B + i] += dl;
  }
  const float* w1 = p.data() + kHead1W;
  std::vector<float> dz(kF, 0.0f);
  for (int i = 0; i < kF; ++i) {
    float dpre = dh1[i] * tr.mask[i];
    if (dpre == 0.0f) continue;
    float* gw1 = g + kHead1W + static_cast<size_t>(i) * kF;
    const float* row = w1 + static_cast<size_t>(i) * kF;
    for (int j = 0; j < kF; ++j) {
      gw1[j] += dpre * tr.z[j];
      dz[j] += dpre * row[j];
    }
    g[kHead1B + i] += dpre;
  }
  int d = ServerModel::tier_dim(s.tier);
  float wt = static_cast<float>(w_tier);
  float* gpw = g + proj_w_offset(s.tier);
  float* gpb = g + proj_b_offset(s.tier);
  for (int i = 0; i < kF; ++i) {
    float dzi = dz[i] * wt;
    if (dzi == 0.0f) continue;
    float* row = gpw + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) row[j] += dzi * s.feat[j];
    gpb[i] += dzi;
  }
}

// Softmax of logits/temperature, numerically stable.
std::vector<double> softmax_t(const std::vector<float>& logits, double temperature) {
  std::vector<double> out(logits.size());
  double mx = -1e30;
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

double ema_history(const std::vector<double>& h) {
  double ema = 0.0;
  for (size_t i = 0; i < h.size(); ++i) ema = i == 0 ? h[0] : 0.5 * ema + 0.5 * h[i];
  return ema;
}

}  // namespace

double QualityWeights::for_tier(QualityTier tier) const {
  switch (tier) {
    case QualityTier::Low: return low;
    case QualityTier::Medium: return medium;
    default: return high;
  }
}

QualityWeights update_quality_weights(const QualityWeights& weights,
                                      const std::array<double, 3>& avg_accuracy_by_tier,
                                      double alpha) {
  auto step = [alpha](double w, double acc) {
    return std::clamp(alpha * w + (1.0 - alpha) * acc, 0.0, 1.0);
  };
  QualityWeights out;
  out.low = step(weights.low, avg_accuracy_by_tier[0]);
  out.medium = step(weights.medium, avg_accuracy_by_tier[1]);
  out.high = step(weights.high, avg_accuracy_by_tier[2]);
  return out;
}

SelectionRecord select_clients(const std::vector<ClientSummary>& eligible, int round,
                               double fraction, Rng& rng) {
  if (eligible.empty()) throw std::invalid_argument("select_clients: no eligible clients");
  if (fraction <= 0.0 || fraction > 1.0)
    throw std::invalid_argument("select_clients: fraction must be in (0, 1]");
  size_t n_pick = static_cast<size_t>(
      std::min<double>(static_cast<double>(eligible.size()),
                       std::ceil(fraction * static_cast<double>(eligible.size()))));

  SelectionRecord rec;
  rec.round = round;

  // Round one has no history to rank by: uniform random draw.
  bool any_history = false;
  for (const ClientSummary& c : eligible)
    if (c.history && !c.history->empty()) any_history = true;
  if (!any_history) {
    std::vector<size_t> order(eligible.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (size_t i = 0; i < eligible.size(); ++i) {
      ScoreBreakdown sb;
      sb.client_id = eligible[i].client_id;
      sb.tier = eligible[i].tier;
      rec.scores.push_back(sb);
    }
    for (size_t i = 0; i < n_pick; ++i) rec.selected.push_back(eligible[order[i]].client_id);
    std::sort(rec.selected.begin(), rec.selected.end());
    return rec;
  }

  size_t max_size = 1;
  for (const ClientSummary& c : eligible) max_size = std::max(max_size, c.data_size);

  // Tier-level mean EMA drives the diversity bonus: tiers trailing the best
  // tier get a lift so weak device types keep competing for slots.
  std::array<double, 3> tier_ema_sum{};
  std::array<int, 3> tier_count{};
  std::vector<double> emas(eligible.size());
  for (size_t i = 0; i < eligible.size(); ++i) {
    emas[i] = eligible[i].history ? ema_history(*eligible[i].history) : 0.0;
    tier_ema_sum[tier_index(eligible[i].tier)] += emas[i];
    tier_count[tier_index(eligible[i].tier)] += 1;
  }
  std::array<double, 3> tier_ema{};
  double best_tier_ema = 0.0;
  for (int t = 0; t < 3; ++t) {
    tier_ema[t] = tier_count[t] > 0 ? tier_ema_sum[t] / tier_count[t] : 0.0;
    best_tier_ema = std::max(best_tier_ema, tier_ema[t]);
  }

  for (size_t i = 0; i < eligible.size(); ++i) {
    const ClientSummary& c = eligible[i];
    ScoreBreakdown sb;
    sb.client_id = c.client_id;
    sb.tier = c.tier;
    sb.perf_ema = emas[i];
    sb.data_term = static_cast<double>(c.data_size) / static_cast<double>(max_size);
    const std::vector<double>& h = *c.history;
    sb.trend = h.size() >= 2 ? std::clamp(h[h.size() - 1] - h[h.size() - 2] + 0.5, 0.0, 1.0) : 0.5;
    sb.diversity_bonus =
        best_tier_ema > 0.0 ? 1.0 - tier_ema[tier_index(c.tier)] / best_tier_ema : 0.0;
    sb.total = 0.4 * sb.perf_ema + 0.2 * sb.data_term + 0.2 * sb.trend + 0.2 * sb.diversity_bonus;
    rec.scores.push_back(sb);
  }

  // Rank by score; the seeded shuffle beforehand makes ties fall to a random
  // but reproducible order.
  std::vector<size_t> order(eligible.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(), [&rec](size_t a, size_t b) {
    return rec.scores[a].total > rec.scores[b].total;
  });
  std::vector<size_t> picked(order.begin(), order.begin() + n_pick);

  // Every tier with eligible clients must be represented: swap each missing
  // tier's best client in for the weakest pick that leaves no tier uncovered.
  for (int t = 0; t < 3; ++t) {
    if (tier_count[t] == 0) continue;
    bool covered = false;
    for (size_t i : picked)
      if (tier_index(eligible[i].tier) == t) covered = true;
    if (covered) continue;
    size_t best_missing = order.size();
    for (size_t i : order) {
      if (tier_index(eligible[i].tier) == t &&
          std::find(picked.begin(), picked.end(), i) == picked.end()) {
        best_missing = i;
        break;
      }
    }
    for (size_t k = picked.size(); k-- > 0;) {
      int pt = tier_index(eligible[picked[k]].tier);
      int same_tier = 0;
      for (size_t i : picked)
        if (tier_index(eligible[i].tier) == pt) ++same_tier;
      if (same_tier > 1) {
        picked[k] = best_missing;
        break;
      }
    }
  }

  for (size_t i : picked) rec.selected.push_back(eligible[i].client_id);
  std::sort(rec.selected.begin(), rec.selected.end());
  return rec;
}

int ServerModel::tier_dim(QualityTier tier) {
  switch (tier) {
    case QualityTier::Low: return kDimLow;
    case QualityTier::Medium: return kDimMid;
    default: return kDimHigh;
  }
}

ServerModel::ServerModel(Rng& init) : params_(kParamCount, 0.0f) {
  auto he_fill = [&init, this](size_t off, int rows, int cols) {
    double scale = std::sqrt(2.0 / cols);
    for (size_t i = 0; i < static_cast<size_t>(rows) * cols; ++i)
      params_[off + i] = static_cast<float>(init.gaussian() * scale);
  };
  he_fill(kProjLowW, kF, kDimLow);
  he_fill(kProjMidW, kF, kDimMid);
  he_fill(kProjHighW, kF, kDimHigh);
  he_fill(kHead1W, kF, kF);
  he_fill(kHead2W, kC, kF);
}

std::vector<float> ServerModel::project(const std::vector<float>& features, QualityTier tier,
                                        double tier_weight) const {
  int d = tier_dim(tier);
  if (features.size() != static_cast<size_t>(d))
    throw std::invalid_argument("ServerModel::project: feature width does not match the tier");
  const float* pw = params_.data() + proj_w_offset(tier);
  const float* pb = params_.data() + proj_b_offset(tier);
  std::vector<float> z(kF);
  for (int i = 0; i < kF; ++i) {
    float acc = pb[i];
    const float* row = pw + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) acc += row[j] * features[j];
    z[i] = static_cast<float>(tier_weight) * acc;
  }
  return z;
}

std::vector<float> ServerModel::fuse(const std::vector<float>& features, QualityTier tier,
                                     const QualityWeights& weights) const {
  int d = tier_dim(tier);
  if (features.size() != static_cast<size_t>(d))
    throw std::invalid_argument("ServerModel::fuse: feature width does not match the tier");
  Sample s;
  s.tier = tier;
  s.feat = features;
  std::vector<float> logits;
  forward_sample(params_, s, weights.for_tier(tier), nullptr, &logits);
  return logits;
}

ServerTrainMetrics train_server(ServerModel& model, const std::vector<FeaturePacket>& packets,
                                const QualityWeights& weights, const ServerModel* teacher,
                                double kd_alpha, double temperature, int epochs, int batch,
                                double lr, double momentum, Rng* rng) {
  if (epochs <= 0 || batch <= 0) throw std::invalid_argument("train_server: bad epochs/batch");
  std::vector<Sample> samples;
  for (const FeaturePacket& p : packets) {
    if (p.skipped || p.n_entries() == 0) continue;
    std::vector<float> feats = dequantize(p);
    for (size_t i = 0; i < p.n_entries(); ++i) {
      Sample s;
      s.tier = p.tier;
      s.feat.assign(feats.begin() + i * p.dim, feats.begin() + (i + 1) * p.dim);
      s.label = p.labels[i];
      samples.push_back(std::move(s));
    }
  }
  if (samples.empty()) throw std::invalid_argument("train_server: no usable packets");

  ServerTrainMetrics metrics;
  metrics.n_samples = samples.size();

  std::vector<float>& params = model.params();
  std::vector<float> velocity(params.size(), 0.0f);
  std::vector<float> grad(params.size());
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int ep = 0; ep < epochs; ++ep) {
    if (rng) rng->shuffle(order);
    double epoch_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += batch) {
      size_t count = std::min<size_t>(batch, order.size() - start);
      std::fill(grad.begin(), grad.end(), 0.0f);
      for (size_t k = 0; k < count; ++k) {
        const Sample& s = samples[order[start + k]];
        double w = weights.for_tier(s.tier);
        Trace tr;
        std::vector<float> logits;
        forward_sample(params, s, w, &tr, &logits);

        std::vector<double> p1 = softmax_t(logits, 1.0);
        double ce = -std::log(std::max(p1[s.label], 1e-12));
        std::vector<float> dlogits(ServerModel::kClasses, 0.0f);
        double scale = w / static_cast<double>(count);
        double loss = (teacher ? (1.0 - kd_alpha) : 1.0) * ce;
        for (int c = 0; c < ServerModel::kClasses; ++c) {
          double d = (teacher ? (1.0 - kd_alpha) : 1.0) * (p1[c] - (c == s.label ? 1.0 : 0.0));
          dlogits[c] = static_cast<float>(scale * d);
        }
        if (teacher) {
          std::vector<float> tlogits;
          forward_sample(teacher->params(), s, w, nullptr, &tlogits);
          std::vector<double> qt = softmax_t(tlogits, temperature);
          std::vector<double> qs = softmax_t(logits, temperature);
          double kl = 0.0;
          for (int c = 0; c < ServerModel::kClasses; ++c) {
            if (qt[c] > 0.0) kl += qt[c] * std::log(std::max(qt[c], 1e-12) / std::max(qs[c], 1e-12));
            // d/ds of T^2 * KL(qt || qs) is T * (qs - qt) per logit.
            dlogits[c] +=
                static_cast<float>(scale * kd_alpha * temperature * (qs[c] - qt[c]));
          }
          loss += kd_alpha * temperature * temperature * kl;
        }
        epoch_loss += w * loss;
        backward_sample(params, s, w, tr, dlogits, &grad);
      }
      for (size_t i = 0; i < params.size(); ++i) {
        velocity[i] = static_cast<float>(momentum) * velocity[i] + grad[i];
        params[i] -= static_cast<float>(lr) * velocity[i];
      }
    }
    metrics.epoch_loss.push_back(epoch_loss / static_cast<double>(samples.size()));
  }
  return metrics;
}

std::vector<float> apply_momentum(const std::vector<float>& theta_t,
                                  const std::vector<float>& theta_prev, double beta) {
  if (theta_t.size() != theta_prev.size())
    throw std::invalid_argument("apply_momentum: shape mismatch");
  std::vector<float> out(theta_t.size());
  for (size_t i = 0; i < theta_t.size(); ++i)
    out[i] = theta_t[i] + static_cast<float>(beta) * (theta_t[i] - theta_prev[i]);
  return out;
}

double evaluate_server(const ServerModel& model, const QualityWeights& weights,
                       const std::vector<LabeledExample>& test_set,
                       const std::array<EvalExtractor, 3>& extractors, Rng& rng,
                       const DegradeParams& degrade_params) {
  if (test_set.empty()) throw std::invalid_argument("evaluate_server: empty test set");

  // Instantiate one backbone per present tier from the averaged parameters.
  std::array<std::unique_ptr<Net<float>>, 3> nets;
  bool any = false;
  for (QualityTier tier : kAllTiers) {
    int t = tier_index(tier);
    if (!extractors[t].present) continue;
    auto net = std::make_unique<Net<float>>(make_tier_spec(tier));
    if (extractors[t].params.size() != net->params().size() ||
        extractors[t].buffers.size() != net->buffers().size())
      throw std::invalid_argument("evaluate_server: extractor does not fit the tier backbone");
    net->params() = extractors[t].params;
    net->buffers() = extractors[t].buffers;
    nets[t] = std::move(net);
    any = true;
  }
  if (!any) throw std::invalid_argument("evaluate_server: no extractor present");

  const int volume = 28 * 28;
  const size_t batch = 256;
  size_t correct = 0;
  std::vector<float> x, logits, feats, fused;
  std::vector<double> logit_sum;
  for (size_t start = 0; start < test_set.size(); start += batch) {
    size_t count = std::min(batch, test_set.size() - start);
    logit_sum.assign(count * ServerModel::kClasses, 0.0);
    for (QualityTier tier : kAllTiers) {
      int t = tier_index(tier);
      if (!nets[t]) continue;
      int dim = tier_feature_dim(tier);
      x.resize(count * volume);
      for (size_t k = 0; k < count; ++k) {
        Image img = degrade(test_set[start + k].image, tier, rng, degrade_params);
        for (int p = 0; p < volume; ++p) x[k * volume + p] = static_cast<float>(img.pix[p]);
      }
      nets[t]->forward(x.data(), static_cast<int>(count), false, nullptr, nullptr, &logits,
                       &feats);
      std::vector<float> f(dim);
      for (size_t k = 0; k < count; ++k) {
        std::copy(feats.begin() + k * dim, feats.begin() + (k + 1) * dim, f.begin());
        fused = model.fuse(f, tier, weights);
        for (int c = 0; c < ServerModel::kClasses; ++c)
          logit_sum[k * ServerModel::kClasses + c] += fused[c];
      }
    }
    for (size_t k = 0; k < count; ++k) {
      const double* row = logit_sum.data() + k * ServerModel::kClasses;
      int best = 0;
      for (int c = 1; c < ServerModel::kClasses; ++c)
        if (row[c] > row[best]) best = c;
      if (best == test_set[start + k].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test_set.size());
}

}  // namespace qahfl
