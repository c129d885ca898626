#include "qahfl/wire.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace qahfl {

namespace {

constexpr size_t kHeaderBytes = 22;

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<uint8_t>& out, float f) { put_u32(out, std::bit_cast<uint32_t>(f)); }

struct Reader {
  const std::vector<uint8_t>& b;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > b.size()) throw std::runtime_error("packet: truncated");
  }
  uint8_t u8() {
    need(1);
    return b[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = b[pos] | (uint16_t(b[pos + 1]) << 8);
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
};

// bytes_wire is defined as the length of the actual encoding, so measure it
// rather than trusting the closed form.
void refresh_accounting(FeaturePacket& p) {
  p.bytes_wire = serialize_packet(p).size();
  p.compression_ratio =
      p.bytes_raw == 0 ? 1.0 : static_cast<double>(p.bytes_wire) / static_cast<double>(p.bytes_raw);
}

}  // namespace

FeaturePacket::FeaturePacket(uint32_t client_id_, uint16_t round_, QualityTier tier_, int dim_,
                             std::vector<float> features_, std::vector<uint8_t> labels_,
                             bool privacy_on, bool noised) {
  if (privacy_on && !noised)
    throw std::logic_error("FeaturePacket: privacy is on but the features were never noised");
  if (dim_ < 0 || dim_ > 65535) throw std::invalid_argument("FeaturePacket: dim out of range");
  if (features_.size() != labels_.size() * static_cast<size_t>(dim_))
    throw std::invalid_argument("FeaturePacket: features/labels size mismatch");
  if (!labels_.empty() && dim_ == 0)
    throw std::invalid_argument("FeaturePacket: entries need a positive dim");
  client_id = client_id_;
  round = round_;
  tier = tier_;
  dim = static_cast<uint16_t>(dim_);
  features = std::move(features_);
  labels = std::move(labels_);
  bytes_raw = wire_bytes(labels.size(), dim, Quantization::None);
  bytes_wire = bytes_raw;
  compression_ratio = 1.0;
}

uint64_t wire_bytes(size_t n_entries, int dim, Quantization quant) {
  uint64_t per_value = quant == Quantization::Int8 ? 1 : 4;
  return kHeaderBytes + per_value * n_entries * static_cast<uint64_t>(dim) + n_entries;
}

std::vector<uint8_t> serialize_packet(const FeaturePacket& p) {
  size_t n = p.n_entries();
  std::vector<uint8_t> out;
  out.reserve(wire_bytes(n, p.dim, p.quant));
  put_u32(out, p.client_id);
  put_u16(out, p.round);
  out.push_back(static_cast<uint8_t>(tier_index(p.tier)));
  put_u32(out, static_cast<uint32_t>(n));
  put_u16(out, p.dim);
  out.push_back(static_cast<uint8_t>(p.quant));
  put_f32(out, p.scale_min);
  put_f32(out, p.scale_max);
  size_t values = n * p.dim;
  if (p.quant == Quantization::Int8) {
    if (p.qdata.size() != values)
      throw std::runtime_error("serialize_packet: int8 payload size mismatch");
    for (int8_t q : p.qdata) out.push_back(static_cast<uint8_t>(q));
  } else {
    if (p.features.size() != values)
      throw std::runtime_error("serialize_packet: float payload size mismatch");
    for (float f : p.features) put_f32(out, f);
  }
  out.insert(out.end(), p.labels.begin(), p.labels.end());
  return out;
}

FeaturePacket parse_packet(const std::vector<uint8_t>& bytes) {
  Reader r{bytes};
  FeaturePacket p;
  p.client_id = r.u32();
  p.round = r.u16();
  uint8_t tier = r.u8();
  if (tier > 2) throw std::runtime_error("packet: bad tier byte");
  p.tier = kAllTiers[tier];
  uint32_t n = r.u32();
  p.dim = r.u16();
  uint8_t quant = r.u8();
  if (quant > 1) throw std::runtime_error("packet: bad quantization byte");
  p.quant = static_cast<Quantization>(quant);
  p.scale_min = r.f32();
  p.scale_max = r.f32();
  if (bytes.size() != wire_bytes(n, p.dim, p.quant))
    throw std::runtime_error("packet: length does not match the header");
  size_t values = static_cast<size_t>(n) * p.dim;
  if (p.quant == Quantization::Int8) {
    p.qdata.resize(values);
    for (auto& q : p.qdata) q = static_cast<int8_t>(r.u8());
  } else {
    p.features.resize(values);
    for (auto& f : p.features) f = r.f32();
  }
  p.labels.resize(n);
  for (auto& l : p.labels) l = r.u8();
  p.bytes_raw = wire_bytes(n, p.dim, Quantization::None);
  refresh_accounting(p);
  return p;
}

void quantize_int8(FeaturePacket& p) {
  if (p.quant == Quantization::Int8) return;
  p.quant = Quantization::Int8;
  if (p.features.empty()) {
    refresh_accounting(p);
    return;
  }
  auto [lo, hi] = std::minmax_element(p.features.begin(), p.features.end());
  if (!std::isfinite(*lo) || !std::isfinite(*hi))
    throw std::runtime_error("quantize_int8: non-finite feature value");
  p.scale_min = *lo;
  p.scale_max = *hi;
  double step = (static_cast<double>(p.scale_max) - p.scale_min) / 254.0;
  p.qdata.resize(p.features.size());
  for (size_t i = 0; i < p.features.size(); ++i) {
    double q = step == 0.0 ? 0.0 : std::nearbyint((p.features[i] - p.scale_min) / step) - 127.0;
    p.qdata[i] = static_cast<int8_t>(q);
  }
  p.features.clear();
  p.features.shrink_to_fit();
  refresh_accounting(p);
}

void subsample_entries(FeaturePacket& p, double keep_fraction, Rng& rng) {
  if (keep_fraction <= 0.0) throw std::invalid_argument("subsample_entries: keep_fraction <= 0");
  size_t n = p.n_entries();
  if (n == 0 || keep_fraction >= 1.0) return;
  size_t m = static_cast<size_t>(std::lround(keep_fraction * static_cast<double>(n)));
  m = std::clamp<size_t>(m, 1, n);
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  idx.resize(m);
  std::sort(idx.begin(), idx.end());

  std::vector<uint8_t> labels(m);
  std::vector<float> features(p.features.empty() ? 0 : m * p.dim);
  std::vector<int8_t> qdata(p.qdata.empty() ? 0 : m * p.dim);
  for (size_t i = 0; i < m; ++i) {
    labels[i] = p.labels[idx[i]];
    if (!features.empty())
      std::copy_n(p.features.begin() + idx[i] * p.dim, p.dim, features.begin() + i * p.dim);
    if (!qdata.empty())
      std::copy_n(p.qdata.begin() + idx[i] * p.dim, p.dim, qdata.begin() + i * p.dim);
  }
  p.labels = std::move(labels);
  p.features = std::move(features);
  p.qdata = std::move(qdata);
  refresh_accounting(p);
}

void compress_packet(FeaturePacket& p, double target_ratio, Rng& rng) {
  if (target_ratio <= 0.0 || target_ratio > 1.0)
    throw std::invalid_argument("compress_packet: target_ratio must be in (0, 1]");
  if (target_ratio >= 1.0 || p.n_entries() == 0) {
    refresh_accounting(p);
    return;
  }
  quantize_int8(p);
  // int8 alone lands near 0.25; below that, thin the entries to make up the
  // difference.
  if (target_ratio < 0.25) subsample_entries(p, target_ratio / 0.25, rng);
  refresh_accounting(p);
}

std::vector<float> dequantize(const FeaturePacket& p) {
  if (p.quant == Quantization::None) return p.features;
  if (!std::isfinite(p.scale_min) || !std::isfinite(p.scale_max) || p.scale_max < p.scale_min)
    throw std::runtime_error("dequantize: corrupt scale header");
  double step = (static_cast<double>(p.scale_max) - p.scale_min) / 254.0;
  std::vector<float> out(p.qdata.size());
  for (size_t i = 0; i < p.qdata.size(); ++i)
    out[i] = static_cast<float>(p.scale_min + (p.qdata[i] + 127.0) * step);
  return out;
}

}  // namespace qahfl
