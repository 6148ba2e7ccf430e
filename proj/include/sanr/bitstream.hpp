#pragma once

// .sanr container. All multi-byte fields are little-endian, floats IEEE-754.
//
//   header   "SANR" | version u8 | U u8 | V u8 | H u16 | W u16 | C_S u16 | r u8 | C_l u8 | k u8 | sections u8
//   section  tag u8 | length u32 | body
//   footer   CRC32 of everything before it, u32
//
// Section bodies:
//   1 weights   count u16, then per tensor: id u16, rank u8, dims u16[rank], scale f32, mu f32, b f32,
//               int_min i32, int_max i32, payload_len u32, payload
//   2 latents   count u8, then per level: level u8, C u8, h u16, w u16, mu f32, b f32,
//               int_min i32, int_max i32, payload_len u32, payload
//   3 raw16     count u16, then per tensor: id u16, rank u8, dims u16[rank], min f32, max f32, u16[size]
//   4 noise     seed u64
//   5 config    context width u8, head kernel u8

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sanr/frozen_model.hpp"
#include "sanr/range_coder.hpp"

namespace sanr {

inline constexpr std::uint8_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 17;
inline constexpr std::size_t kFooterBytes = 4;

enum class SectionTag : std::uint8_t { kWeights = 1, kLatents = 2, kRaw16 = 3, kNoise = 4, kConfig = 5 };

inline const char* section_name(std::uint8_t tag) {
  switch (static_cast<SectionTag>(tag)) {
    case SectionTag::kWeights: return "weights";
    case SectionTag::kLatents: return "latents";
    case SectionTag::kRaw16: return "raw16";
    case SectionTag::kNoise: return "noise";
    case SectionTag::kConfig: return "config";
  }
  return "unknown";
}

namespace tensor_id {
inline constexpr int kBasis = 8, kBnScale = 9, kBnShift = 10;
inline constexpr int kHeadKernel = 64, kHeadBias = 65;
inline int block(int b, int slot) { return b * 16 + slot; }
inline int context(int level, int slot) { return 80 + level * 8 + slot; }
}  // namespace tensor_id

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint32_t v) { buf_.push_back(static_cast<std::uint8_t>(v)); }
  void u16(std::uint32_t v) {
    require(v <= 0xFFFF, "value does not fit in 16 bits");
    u8(v & 0xFF), u8(v >> 8);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8((v >> (8 * i)) & 0xFF);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint32_t>((v >> (8 * i)) & 0xFF));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void dims(const std::vector<int>& shape) {
    u8(static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) u16(static_cast<std::uint32_t>(d));
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint32_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u16() {
    const std::uint32_t lo = u8();
    return lo | (u8() << 8);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= u8() << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<int> dims() {
    const int rank = static_cast<int>(u8());
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (auto& d : shape) d = static_cast<int>(u16());
    return shape;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const { require(data_.size() - pos_ >= n, "truncated stream"); }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Payload coders. Exposed separately so coded sizes can be measured per tensor.

inline std::vector<std::uint8_t> encode_weight_payload(const QuantizedTensor& q) {
  if (q.ints.empty()) return RangeEncoder().finish();
  const FrequencyTable t = laplace_table(q.laplace_mu, q.laplace_b, q.min_int(), q.max_int());
  return range_encode(std::span<const std::int32_t>(q.ints), [&](std::size_t) -> const FrequencyTable& { return t; });
}

inline std::vector<std::int32_t> decode_weight_payload(std::span<const std::uint8_t> payload, std::size_t count,
                                                       float mu, float b, std::int32_t lo, std::int32_t hi) {
  if (count == 0) return {};
  const FrequencyTable t = laplace_table(mu, b, lo, hi);
  return range_decode(payload, count, [&](std::size_t) -> const FrequencyTable& { return t; });
}

namespace detail {

/// Walks the symbols of one latent level in coding order, building the table
/// for each element. `symbol_at(c, i)` must return the already known value of
/// channel c, element i, for every c before the one being coded.
template <typename Visit>
void for_each_latent_table(int channels, int h, int w, const LaplaceParams& first, const ContextModelParams& ctx,
                           std::int32_t lo, std::int32_t hi, const std::vector<std::int32_t>& ints, Visit&& visit) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const FrequencyTable first_table = laplace_table(first.mu, first.b, lo, hi);
  for (int c = 0; c < channels; ++c) {
    if (c == 0) {
      for (std::size_t i = 0; i < plane; ++i) visit(i, first_table);
      continue;
    }
    TensorD prev({h, w});
    for (std::size_t i = 0; i < plane; ++i) prev[i] = ints[(c - 1) * plane + i];
    const ContextPrediction pred = context_predict(prev, ctx);
    for (std::size_t i = 0; i < plane; ++i) {
      visit(c * plane + i, laplace_table(pred.mu[i], pred.scale[i], lo, hi));
    }
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_latent_payload(const QuantizedLatent& y, const ContextModelParams& ctx) {
  if (y.ints.empty()) return RangeEncoder().finish();
  const auto [lo, hi] = std::minmax_element(y.ints.begin(), y.ints.end());
  RangeEncoder enc;
  detail::for_each_latent_table(y.shape[0], y.shape[1], y.shape[2], y.first_channel(), ctx, *lo, *hi, y.ints,
                                [&](std::size_t i, const FrequencyTable& t) { enc.encode(y.ints[i], t); });
  return enc.finish();
}

inline std::vector<std::int32_t> decode_latent_payload(std::span<const std::uint8_t> payload,
                                                       const std::vector<int>& shape, const LaplaceParams& first,
                                                       const ContextModelParams& ctx, std::int32_t lo,
                                                       std::int32_t hi) {
  std::vector<std::int32_t> ints(Tensor::count(shape));
  if (ints.empty()) return ints;
  RangeDecoder dec(payload);
  detail::for_each_latent_table(shape[0], shape[1], shape[2], first, ctx, lo, hi, ints,
                                [&](std::size_t i, const FrequencyTable& t) { ints[i] = dec.decode(t); });
  return ints;
}

// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_model(const FrozenModel& m) {
  const ModelConfig& cfg = m.config;
  cfg.validate();
  require(m.latents.has_value() != m.noise_seed.has_value(), "model is not finalized");
  require(cfg.spatial_channels <= 0xFFFF && cfg.rank <= 255 && cfg.latent_channels <= 255 && cfg.kernel_size <= 255,
          "configuration does not fit the header");

  std::vector<std::pair<SectionTag, std::vector<std::uint8_t>>> sections;

  {
    detail::ByteWriter w;
    w.u16(kNumBlocks * kQatTensorsPerBlock);
    for (int b = 0; b < kNumBlocks; ++b) {
      for (int s = 0; s < kQatTensorsPerBlock; ++s) {
        const QuantizedTensor& q = m.blocks[b].qat[s];
        require(Tensor::count(q.shape) == q.ints.size(), "weight tensor shape mismatch");
        w.u16(tensor_id::block(b, s));
        w.dims(q.shape);
        w.f32(q.scale), w.f32(q.laplace_mu), w.f32(q.laplace_b);
        w.i32(q.min_int()), w.i32(q.max_int());
        const auto payload = encode_weight_payload(q);
        w.u32(static_cast<std::uint32_t>(payload.size()));
        w.bytes(payload);
      }
    }
    sections.emplace_back(SectionTag::kWeights, std::move(w.buffer()));
  }

  if (m.latents) {
    detail::ByteWriter w;
    w.u8(kNumBlocks);
    for (int l = 0; l < kNumBlocks; ++l) {
      const QuantizedLatent& y = (*m.latents)[l];
      require(y.shape.size() == 3 && Tensor::count(y.shape) == y.ints.size(), "latent shape mismatch");
      const auto [lo, hi] = y.ints.empty() ? std::pair{0, 0}
                                           : std::pair{*std::min_element(y.ints.begin(), y.ints.end()),
                                                       *std::max_element(y.ints.begin(), y.ints.end())};
      w.u8(static_cast<std::uint32_t>(l + 1));
      w.u8(static_cast<std::uint32_t>(y.shape[0])), w.u16(static_cast<std::uint32_t>(y.shape[1]));
      w.u16(static_cast<std::uint32_t>(y.shape[2]));
      w.f32(y.first_mu), w.f32(y.first_b);
      w.i32(lo), w.i32(hi);
      const auto payload = encode_latent_payload(y, m.context[l].dequantize());
      w.u32(static_cast<std::uint32_t>(payload.size()));
      w.bytes(payload);
    }
    sections.emplace_back(SectionTag::kLatents, std::move(w.buffer()));
  }

  {
    detail::ByteWriter w;
    std::vector<std::pair<int, const Uniform16*>> raw;
    for (int b = 0; b < kNumBlocks; ++b) {
      raw.emplace_back(tensor_id::block(b, tensor_id::kBasis), &m.blocks[b].basis);
      raw.emplace_back(tensor_id::block(b, tensor_id::kBnScale), &m.blocks[b].bn_scale);
      raw.emplace_back(tensor_id::block(b, tensor_id::kBnShift), &m.blocks[b].bn_shift);
    }
    raw.emplace_back(tensor_id::kHeadKernel, &m.head_kernel);
    raw.emplace_back(tensor_id::kHeadBias, &m.head_bias);
    if (m.latents && cfg.latent_channels > 1) {
      for (int l = 0; l < kNumBlocks; ++l) {
        for (int s = 0; s < 6; ++s) raw.emplace_back(tensor_id::context(l, s), &m.context[l].tensors[s]);
      }
    }
    w.u16(static_cast<std::uint32_t>(raw.size()));
    for (const auto& [id, t] : raw) {
      w.u16(static_cast<std::uint32_t>(id));
      w.dims(t->shape);
      w.f32(t->min), w.f32(t->max);
      for (auto q : t->q) w.u16(q);
    }
    sections.emplace_back(SectionTag::kRaw16, std::move(w.buffer()));
  }

  if (m.noise_seed) {
    detail::ByteWriter w;
    w.u64(*m.noise_seed);
    sections.emplace_back(SectionTag::kNoise, std::move(w.buffer()));
  }

  if (cfg.context_channels != 4 || cfg.head_kernel_size != 3) {
    detail::ByteWriter w;
    w.u8(static_cast<std::uint32_t>(cfg.context_channels)), w.u8(static_cast<std::uint32_t>(cfg.head_kernel_size));
    sections.emplace_back(SectionTag::kConfig, std::move(w.buffer()));
  }

  detail::ByteWriter out;
  for (char c : std::string("SANR")) out.u8(static_cast<std::uint8_t>(c));
  out.u8(kFormatVersion);
  out.u8(static_cast<std::uint32_t>(cfg.views_u)), out.u8(static_cast<std::uint32_t>(cfg.views_v));
  out.u16(static_cast<std::uint32_t>(cfg.height)), out.u16(static_cast<std::uint32_t>(cfg.width));
  out.u16(static_cast<std::uint32_t>(cfg.spatial_channels));
  out.u8(static_cast<std::uint32_t>(cfg.rank)), out.u8(static_cast<std::uint32_t>(cfg.latent_channels));
  out.u8(static_cast<std::uint32_t>(cfg.kernel_size));
  out.u8(static_cast<std::uint32_t>(sections.size()));
  for (const auto& [tag, body] : sections) {
    out.u8(static_cast<std::uint32_t>(tag));
    out.u32(static_cast<std::uint32_t>(body.size()));
    out.bytes(body);
  }
  out.u32(detail::crc32_of(out.buffer()));
  return std::move(out.buffer());
}

struct SectionInfo {
  std::uint8_t tag = 0;
  std::size_t bytes = 0;  // including the 5-byte section prefix
};

struct StreamInfo {
  ModelConfig config;
  std::uint8_t version = 0;
  std::vector<SectionInfo> sections;
  std::size_t total_bytes = 0;

  std::size_t section_bytes(SectionTag tag) const {
    std::size_t n = 0;
    for (const auto& s : sections) n += s.tag == static_cast<std::uint8_t>(tag) ? s.bytes : 0;
    return n;
  }
  double raw_share() const { return static_cast<double>(section_bytes(SectionTag::kRaw16)) / total_bytes; }
};

namespace detail {

struct ParsedStream {
  StreamInfo info;
  std::vector<std::pair<std::uint8_t, std::span<const std::uint8_t>>> bodies;
};

inline ParsedStream parse_stream(std::span<const std::uint8_t> data) {
  require(data.size() >= kHeaderBytes, "truncated stream");
  require(std::memcmp(data.data(), "SANR", 4) == 0, "not a SANR stream (bad magic)");
  ByteReader r(data.subspan(4));
  ParsedStream p;
  p.info.version = static_cast<std::uint8_t>(r.u8());
  require(p.info.version == kFormatVersion, "unsupported version " + std::to_string(p.info.version));
  require(data.size() >= kHeaderBytes + kFooterBytes, "truncated stream");
  const std::size_t body_end = data.size() - kFooterBytes;
  ByteReader footer(data.subspan(body_end));
  require(footer.u32() == crc32_of(data.first(body_end)), "CRC failure");

  ModelConfig& cfg = p.info.config;
  cfg.views_u = static_cast<int>(r.u8());
  cfg.views_v = static_cast<int>(r.u8());
  cfg.height = static_cast<int>(r.u16());
  cfg.width = static_cast<int>(r.u16());
  cfg.spatial_channels = static_cast<int>(r.u16());
  cfg.rank = static_cast<int>(r.u8());
  cfg.latent_channels = static_cast<int>(r.u8());
  cfg.kernel_size = static_cast<int>(r.u8());
  cfg.context_channels = 4;
  cfg.head_kernel_size = 3;
  const int count = static_cast<int>(r.u8());
  ByteReader body(data.subspan(kHeaderBytes, body_end - kHeaderBytes));
  for (int i = 0; i < count; ++i) {
    const auto tag = static_cast<std::uint8_t>(body.u8());
    const std::size_t len = body.u32();
    p.bodies.emplace_back(tag, body.bytes(len));
    p.info.sections.push_back({tag, len + 5});
  }
  require(body.remaining() == 0, "trailing bytes after the last section");
  p.info.total_bytes = data.size();
  for (const auto& [tag, b] : p.bodies) {
    if (tag == static_cast<std::uint8_t>(SectionTag::kConfig)) {
      ByteReader c(b);
      cfg.context_channels = static_cast<int>(c.u8());
      cfg.head_kernel_size = static_cast<int>(c.u8());
    }
  }
  return p;
}

}  // namespace detail

/// Header fields and per-section byte accounting; validates magic, version and CRC.
inline StreamInfo inspect_stream(std::span<const std::uint8_t> data) { return detail::parse_stream(data).info; }

inline FrozenModel deserialize_model(std::span<const std::uint8_t> data) {
  auto parsed = detail::parse_stream(data);
  FrozenModel m;
  m.config = parsed.info.config;
  m.config.validate();
  const ModelConfig& cfg = m.config;

  std::map<int, Uniform16> raw;
  const std::span<const std::uint8_t>* latent_body = nullptr;
  bool have_weights = false;
  for (auto& [tag, body] : parsed.bodies) {
    detail::ByteReader r(body);
    switch (static_cast<SectionTag>(tag)) {
      case SectionTag::kWeights: {
        const int n = static_cast<int>(r.u16());
        for (int i = 0; i < n; ++i) {
          const int id = static_cast<int>(r.u16());
          const int b = id / 16, s = id % 16;
          require(b < kNumBlocks && s < kQatTensorsPerBlock, "unknown weight tensor id " + std::to_string(id));
          QuantizedTensor& q = m.blocks[b].qat[s];
          q.shape = r.dims();
          q.scale = r.f32(), q.laplace_mu = r.f32(), q.laplace_b = r.f32();
          const std::int32_t lo = r.i32(), hi = r.i32();
          const auto payload = r.bytes(r.u32());
          q.ints = decode_weight_payload(payload, Tensor::count(q.shape), q.laplace_mu, q.laplace_b, lo, hi);
        }
        have_weights = true;
        break;
      }
      case SectionTag::kLatents: latent_body = &body; break;
      case SectionTag::kRaw16: {
        const int n = static_cast<int>(r.u16());
        for (int i = 0; i < n; ++i) {
          const int id = static_cast<int>(r.u16());
          Uniform16 t;
          t.shape = r.dims();
          t.min = r.f32(), t.max = r.f32();
          t.q.resize(Tensor::count(t.shape));
          for (auto& q : t.q) q = static_cast<std::uint16_t>(r.u16());
          raw[id] = std::move(t);
        }
        break;
      }
      case SectionTag::kNoise: m.noise_seed = r.u64(); break;
      case SectionTag::kConfig: break;
      default: throw Error("unknown section tag " + std::to_string(tag));
    }
  }
  require(have_weights, "stream has no weight section");
  auto take = [&](int id) {
    auto it = raw.find(id);
    require(it != raw.end(), "missing raw tensor " + std::to_string(id));
    return it->second;
  };
  for (int b = 0; b < kNumBlocks; ++b) {
    m.blocks[b].basis = take(tensor_id::block(b, tensor_id::kBasis));
    m.blocks[b].bn_scale = take(tensor_id::block(b, tensor_id::kBnScale));
    m.blocks[b].bn_shift = take(tensor_id::block(b, tensor_id::kBnShift));
  }
  m.head_kernel = take(tensor_id::kHeadKernel);
  m.head_bias = take(tensor_id::kHeadBias);

  if (latent_body) {
    const bool with_ctx = cfg.latent_channels > 1;
    for (int l = 0; l < kNumBlocks; ++l) {
      if (with_ctx) {
        for (int s = 0; s < 6; ++s) m.context[l].tensors[s] = take(tensor_id::context(l, s));
      }
    }
    detail::ByteReader r(*latent_body);
    const int n = static_cast<int>(r.u8());
    require(n == kNumBlocks, "latent section must hold four levels");
    std::array<QuantizedLatent, kNumBlocks> latents;
    for (int l = 0; l < kNumBlocks; ++l) {
      const int level = static_cast<int>(r.u8());
      require(level == l + 1, "latent levels out of order");
      QuantizedLatent& y = latents[l];
      const int c = static_cast<int>(r.u8()), h = static_cast<int>(r.u16()), w = static_cast<int>(r.u16());
      const auto [eh, ew] = latent_shape(level, cfg.height, cfg.width);
      require(c == cfg.latent_channels && h == eh && w == ew, "latent level has the wrong shape");
      y.shape = {c, h, w};
      y.first_mu = r.f32(), y.first_b = r.f32();
      const std::int32_t lo = r.i32(), hi = r.i32();
      const auto payload = r.bytes(r.u32());
      const ContextModelParams ctx = with_ctx ? m.context[l].dequantize() : ContextModelParams{};
      y.ints = decode_latent_payload(payload, y.shape, y.first_channel(), ctx, lo, hi);
    }
    m.latents = std::move(latents);
  }
  require(m.latents.has_value() != m.noise_seed.has_value(), "stream must carry either latents or a noise seed");
  return m;
}

inline void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), "write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace sanr
