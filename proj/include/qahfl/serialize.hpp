#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qahfl/nn.hpp"

namespace qahfl {

// One named tensor inside a checkpoint. offset/count are in float32 units
// into the flat payload; parameters come first, then batch norm buffers.
struct TensorEntry {
  std::string name;
  std::vector<uint32_t> shape;
  uint64_t offset = 0;
  uint64_t count = 0;
};

// Deterministic tensor listing for a spec (weights, biases, bn stats, ...).
std::vector<TensorEntry> manifest_for(const ModelSpec& spec);

// Binary checkpoint: magic, version, manifest, then the flat little-endian
// float32 payload. Works the same for float and double nets (doubles are
// narrowed to f32 on the wire).
std::vector<uint8_t> serialize_model(const ModelSpec& spec, const std::vector<float>& params,
                                     const std::vector<float>& buffers);

// Parses a checkpoint produced for the same spec; throws std::runtime_error
// on magic/shape/name mismatches or truncation.
void deserialize_model(const std::vector<uint8_t>& blob, const ModelSpec& spec,
                       std::vector<float>* params, std::vector<float>* buffers);

// Exact byte size a checkpoint of this spec will serialize to; used for the
// device model-size admission gate.
uint64_t serialized_size_bytes(const ModelSpec& spec);

}  // namespace qahfl
