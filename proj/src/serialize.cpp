#include "qahfl/serialize.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

namespace qahfl {
namespace {

constexpr char kMagic[4] = {'Q', 'A', 'H', 'F'};
constexpr uint16_t kVersion = 1;

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

struct Reader {
  const std::vector<uint8_t>& b;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > b.size()) throw std::runtime_error("checkpoint: truncated");
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
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
};

uint64_t manifest_bytes(const std::vector<TensorEntry>& entries) {
  uint64_t n = 4 + 2 + 2;  // magic, version, entry count
  for (const TensorEntry& e : entries)
    n += 1 + e.name.size() + 1 + 4 * e.shape.size() + 8 + 8;
  return n;
}

}  // namespace

std::vector<TensorEntry> manifest_for(const ModelSpec& spec) {
  std::vector<LayerLayout> layout = plan_layout(spec);
  int64_t param_total = spec.param_count();
  std::vector<TensorEntry> out;
  auto add = [&out](const std::string& name, std::vector<uint32_t> shape, uint64_t offset) {
    uint64_t count = 1;
    for (uint32_t d : shape) count *= d;
    out.push_back({name, std::move(shape), offset, count});
  };
  for (size_t i = 0; i < layout.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    const LayerLayout& ll = layout[i];
    uint64_t po = static_cast<uint64_t>(ll.param_offset);
    switch (l.kind) {
      case LayerKind::Conv2d: {
        uint32_t oc = l.out_ch, ic = ll.in_c, k = l.kernel;
        add(l.name + ".w", {oc, ic, k, k}, po);
        add(l.name + ".b", {oc}, po + static_cast<uint64_t>(oc) * ic * k * k);
        break;
      }
      case LayerKind::Dense: {
        uint32_t oc = l.out_ch, ic = ll.in_c;
        add(l.name + ".w", {oc, ic}, po);
        add(l.name + ".b", {oc}, po + static_cast<uint64_t>(oc) * ic);
        break;
      }
      case LayerKind::BatchNorm: {
        uint32_t c = ll.in_c;
        add(l.name + ".gamma", {c}, po);
        add(l.name + ".beta", {c}, po + c);
        uint64_t bo = param_total + static_cast<uint64_t>(ll.buffer_offset);
        add(l.name + ".rmean", {c}, bo);
        add(l.name + ".rvar", {c}, bo + c);
        break;
      }
      case LayerKind::SqueezeExcite: {
        uint32_t c = ll.in_c, h = l.hidden;
        add(l.name + ".w1", {h, c}, po);
        add(l.name + ".b1", {h}, po + static_cast<uint64_t>(h) * c);
        add(l.name + ".w2", {c, h}, po + static_cast<uint64_t>(h) * c + h);
        add(l.name + ".b2", {c}, po + static_cast<uint64_t>(h) * c + h + static_cast<uint64_t>(c) * h);
        break;
      }
      default:
        break;
    }
  }
  return out;
}

std::vector<uint8_t> serialize_model(const ModelSpec& spec, const std::vector<float>& params,
                                     const std::vector<float>& buffers) {
  if (params.size() != static_cast<size_t>(spec.param_count()) ||
      buffers.size() != static_cast<size_t>(spec.buffer_count()))
    throw std::runtime_error("serialize_model: vector sizes do not match the spec");
  std::vector<TensorEntry> entries = manifest_for(spec);
  std::vector<uint8_t> out;
  out.reserve(manifest_bytes(entries) + 4 * (params.size() + buffers.size()));
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kVersion);
  put_u16(out, static_cast<uint16_t>(entries.size()));
  for (const TensorEntry& e : entries) {
    if (e.name.size() > 255) throw std::runtime_error("serialize_model: tensor name too long");
    out.push_back(static_cast<uint8_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<uint8_t>(e.shape.size()));
    for (uint32_t d : e.shape) put_u32(out, d);
    put_u64(out, e.offset);
    put_u64(out, e.count);
  }
  auto put_f32 = [&out](float f) { put_u32(out, std::bit_cast<uint32_t>(f)); };
  for (float f : params) put_f32(f);
  for (float f : buffers) put_f32(f);
  return out;
}

void deserialize_model(const std::vector<uint8_t>& blob, const ModelSpec& spec,
                       std::vector<float>* params, std::vector<float>* buffers) {
  Reader r{blob};
  r.need(4);
  if (std::memcmp(blob.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  r.pos = 4;
  if (r.u16() != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  uint16_t n_entries = r.u16();

  std::vector<TensorEntry> expected = manifest_for(spec);
  if (n_entries != expected.size())
    throw std::runtime_error("checkpoint: tensor count does not match the model");
  for (const TensorEntry& want : expected) {
    r.need(1);
    uint8_t name_len = blob[r.pos++];
    r.need(name_len);
    std::string name(blob.begin() + r.pos, blob.begin() + r.pos + name_len);
    r.pos += name_len;
    r.need(1);
    uint8_t ndims = blob[r.pos++];
    std::vector<uint32_t> shape(ndims);
    for (uint8_t d = 0; d < ndims; ++d) shape[d] = r.u32();
    uint64_t offset = r.u64();
    uint64_t count = r.u64();
    if (name != want.name || shape != want.shape || offset != want.offset || count != want.count)
      throw std::runtime_error("checkpoint: tensor '" + name + "' does not match the model");
  }

  size_t np = static_cast<size_t>(spec.param_count());
  size_t nb = static_cast<size_t>(spec.buffer_count());
  r.need(4 * (np + nb));
  params->resize(np);
  buffers->resize(nb);
  for (size_t i = 0; i < np; ++i) (*params)[i] = std::bit_cast<float>(r.u32());
  for (size_t i = 0; i < nb; ++i) (*buffers)[i] = std::bit_cast<float>(r.u32());
}

uint64_t serialized_size_bytes(const ModelSpec& spec) {
  return manifest_bytes(manifest_for(spec)) +
         4 * static_cast<uint64_t>(spec.param_count() + spec.buffer_count());
}

}  // namespace qahfl
