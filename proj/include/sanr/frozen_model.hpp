#pragma once

// A finalized representation: integer weights and latents plus the 16-bit
// minor tensors. This is exactly what a stream carries, and both the encoder
// and the decoder reconstruct through it.

#include <array>
#include <cstdint>
#include <optional>

#include "sanr/entropy_models.hpp"
#include "sanr/lightfield_io.hpp"
#include "sanr/model.hpp"
#include "sanr/quantization.hpp"

namespace sanr {

/// One latent level on the integer grid, C_l x h x w, with the Laplace
/// statistics of its first channel.
struct QuantizedLatent {
  std::vector<int> shape;
  std::vector<std::int32_t> ints;
  float first_mu = 0.0f;
  float first_b = 1.0f;

  Tensor values() const {
    Tensor t(shape);
    for (std::size_t i = 0; i < ints.size(); ++i) t[i] = static_cast<float>(ints[i]);
    return t;
  }
  TensorD values_d() const { return TensorD(shape, std::vector<double>(ints.begin(), ints.end())); }
  LaplaceParams first_channel() const { return {first_mu, first_b}; }

  bool operator==(const QuantizedLatent&) const = default;
};

struct RawContextModel {
  std::array<Uniform16, 6> tensors;  // w1, b1, w2, b2, w3, b3

  ContextModelParams dequantize() const {
    return {tensors[0].dequantize(), tensors[1].dequantize(), tensors[2].dequantize(),
            tensors[3].dequantize(), tensors[4].dequantize(), tensors[5].dequantize()};
  }
  bool operator==(const RawContextModel&) const = default;
};

inline RawContextModel ptq_context(const ContextModelParams& ctx) {
  RawContextModel r;
  int i = 0;
  ctx.for_each([&](const Tensor& t) { r.tensors[i++] = ptq_uniform16(t); });
  return r;
}

struct FrozenBlock {
  std::array<QuantizedTensor, kQatTensorsPerBlock> qat;  // indexed by QatTensor
  Uniform16 basis;
  Uniform16 bn_scale;
  Uniform16 bn_shift;

  bool operator==(const FrozenBlock&) const = default;
};

struct FrozenModel {
  ModelConfig config;
  std::array<FrozenBlock, kNumBlocks> blocks;
  Uniform16 head_kernel;
  Uniform16 head_bias;
  /// Present for transmitted latents. Absent when the latents are a seeded
  /// noise input (base-model variant); then noise_seed is set.
  std::optional<std::array<QuantizedLatent, kNumBlocks>> latents;
  std::array<RawContextModel, kNumBlocks> context;
  std::optional<std::uint64_t> noise_seed;

  bool operator==(const FrozenModel&) const = default;
};

/// Fixed pseudo-random input codes used in place of learned latents.
inline std::array<Tensor, kNumBlocks> noise_latents(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::array<Tensor, kNumBlocks> out;
  for (int i = 0; i < kNumBlocks; ++i) {
    const auto [h, w] = latent_shape(i + 1, cfg.height, cfg.width);
    out[i] = Tensor({cfg.latent_channels, h, w});
    for (auto& v : out[i].storage()) v = static_cast<float>(rng.normal());
  }
  return out;
}

inline std::array<Tensor, kNumBlocks> latent_inputs(const FrozenModel& m) {
  if (m.latents) {
    std::array<Tensor, kNumBlocks> out;
    for (int i = 0; i < kNumBlocks; ++i) out[i] = (*m.latents)[i].values();
    return out;
  }
  require(m.noise_seed.has_value(), "model has neither latents nor a noise seed");
  return noise_latents(m.config, *m.noise_seed);
}

inline DecoderNetwork decoder_network(const FrozenModel& m) {
  DecoderNetwork net;
  net.config = m.config;
  for (int i = 0; i < kNumBlocks; ++i) {
    const auto& fb = m.blocks[i];
    auto& w = net.blocks[i];
    w.basis = fb.basis.dequantize();
    w.spatial = fb.qat[0].dequantize();
    w.horizontal = fb.qat[1].dequantize();
    w.vertical = fb.qat[2].dequantize();
    w.bias_u = fb.qat[3].dequantize();
    w.bias_v = fb.qat[4].dequantize();
    const Tensor scale = fb.bn_scale.dequantize(), shift = fb.bn_shift.dequantize();
    net.norms[i].scale.assign(scale.values().begin(), scale.values().end());
    net.norms[i].shift.assign(shift.values().begin(), shift.values().end());
  }
  net.head.kernel = m.head_kernel.dequantize();
  net.head.bias = m.head_bias.dequantize();
  return net;
}

/// Renders every view of the light field the model represents.
inline LightField reconstruct(const FrozenModel& m) {
  const DecoderNetwork net = decoder_network(m);
  const auto latents = latent_inputs(m);
  const ModelConfig& cfg = m.config;
  LightField lf(cfg.views_u, cfg.views_v, cfg.height, cfg.width);
  for (std::size_t i = 0; i < lf.views().size(); ++i) {
    lf.views()[i] = to_image(sanr_forward(net, lf.coord(i), latents));
  }
  return lf;
}

}  // namespace sanr
