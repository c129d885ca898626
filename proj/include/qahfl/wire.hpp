#pragma once

#include <cstdint>
#include <vector>

#include "qahfl/image.hpp"
#include "qahfl/rng.hpp"

namespace qahfl {

enum class Quantization : uint8_t { None = 0, Int8 = 1 };

// One client upload: per-example feature vectors plus their labels, with
// exact byte accounting. The wire layout is little-endian throughout:
//   client_id u32 | round u16 | tier u8 | n_entries u32 | dim u16 | quant u8
//   | scale_min f32 | scale_max f32       (22-byte header)
//   | payload (n*dim int8, or n*dim f32)  | labels (n u8)
// bytes_raw is the size of the float32 encoding of the packet as built;
// bytes_wire tracks the current encoding and always equals the length of
// serialize_packet() output. eps_spent and skipped are ledger bookkeeping
// carried alongside the packet, never serialized.
struct FeaturePacket {
  uint32_t client_id = 0;
  uint16_t round = 0;
  QualityTier tier = QualityTier::Low;
  uint16_t dim = 0;
  Quantization quant = Quantization::None;
  float scale_min = 0.0f;  // int8 affine range, meaningful once quantized
  float scale_max = 0.0f;
  std::vector<float> features;  // n*dim row-major; cleared by quantization
  std::vector<int8_t> qdata;    // n*dim int8 payload; empty until quantized
  std::vector<uint8_t> labels;  // one per entry
  uint64_t bytes_raw = 0;
  uint64_t bytes_wire = 0;
  double compression_ratio = 1.0;
  double eps_spent = 0.0;
  bool skipped = false;

  FeaturePacket() = default;

  // The only way to package freshly extracted features. The last two flags
  // form a tripwire: building a packet from un-noised features while privacy
  // is on throws std::logic_error, so no code path can leak raw features by
  // forgetting the mechanism. Throws std::invalid_argument when sizes do not
  // line up (features must hold labels.size() * dim values).
  FeaturePacket(uint32_t client_id, uint16_t round, QualityTier tier, int dim,
                std::vector<float> features, std::vector<uint8_t> labels, bool privacy_on,
                bool noised);

  size_t n_entries() const { return labels.size(); }
};

// Closed form for the wire size of n entries of width dim: header, payload
// at 4 or 1 bytes per value, one label byte per entry.
uint64_t wire_bytes(size_t n_entries, int dim, Quantization quant);

// Exact wire encoding; bytes_wire measures precisely this byte string.
std::vector<uint8_t> serialize_packet(const FeaturePacket& p);

// Inverse of serialize_packet. Recomputes the byte accounting from the
// received encoding (the original pre-compression entry count is not on the
// wire, so bytes_raw is the float32 size of the entries that arrived).
// Throws std::runtime_error on truncation, trailing bytes, or bad fields.
FeaturePacket parse_packet(const std::vector<uint8_t>& bytes);

// In-place affine int8 quantization against the per-packet min/max: values
// map to [-127, 127] in steps of (max-min)/254. Constant packets quantize to
// all zeros and round-trip exactly. No-op when already quantized.
void quantize_int8(FeaturePacket& p);

// Keeps a seeded uniform sample of round(keep_fraction * n) entries, at
// least one, in their original order. keep_fraction >= 1 keeps everything.
void subsample_entries(FeaturePacket& p, double keep_fraction, Rng& rng);

// Two-stage payload compression toward target_ratio (of bytes_raw):
// target 1 sends raw float32; targets below 1 switch to int8 quantization
// (ratio floor near 0.25); targets below 0.25 additionally subsample entries
// by target/0.25. Accounting is refreshed from the actual encoding.
void compress_packet(FeaturePacket& p, double target_ratio, Rng& rng);

// The features back as real values, flat n*dim row-major. Applies the affine
// inverse when quantized (per-value error at most half a quantization step).
// Throws std::runtime_error when the scale header is corrupt.
std::vector<float> dequantize(const FeaturePacket& p);

}  // namespace qahfl
