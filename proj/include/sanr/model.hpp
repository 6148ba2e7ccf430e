#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "sanr/entropy_models.hpp"
#include "sanr/layers.hpp"
#include "sanr/lightfield_io.hpp"
#include "sanr/rng.hpp"
#include "sanr/tensor.hpp"

namespace sanr {

inline constexpr int kNumBlocks = 4;

/// Network hyperparameters. Every block uses the same spatial width C_S; the
/// modulated convolution emits C_S + 2 channels (one horizontal and one vertical
/// channel on top of the spatial ones).
struct ModelConfig {
  int spatial_channels = 48;  // C_S
  int rank = 6;               // r, number of kernel bases
  int latent_channels = 10;   // C_l
  int kernel_size = 3;        // k
  int views_u = 9;
  int views_v = 9;
  int height = 432;
  int width = 624;
  int context_channels = 4;   // hidden width of each context model
  int head_kernel_size = 3;

  int out_channels() const { return spatial_channels + 2; }
  int in_channels(int block) const { return block == 0 ? latent_channels : out_channels() + latent_channels; }

  void validate() const {
    require(spatial_channels >= 1 && rank >= 1 && latent_channels >= 1, "C_S, r and C_l must be positive");
    require(kernel_size >= 1 && kernel_size % 2 == 1, "kernel size must be odd");
    require(head_kernel_size >= 1 && head_kernel_size % 2 == 1, "head kernel size must be odd");
    require(context_channels >= 1, "context width must be positive");
    require(views_u >= 1 && views_v >= 1 && views_u <= 255 && views_v <= 255, "view grid out of range");
    constexpr int kMultiple = 1 << kNumBlocks;
    require(height % kMultiple == 0 && width % kMultiple == 0,
            "H and W must be divisible by " + std::to_string(kMultiple));
    require(height <= 65535 && width <= 65535, "spatial size out of range");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Latent size at `level` (1-based): round_half_to_even(h / 2^(5 - level)).
inline std::pair<int, int> latent_shape(int level, int h, int w) {
  require(level >= 1 && level <= kNumBlocks, "latent level must be in 1..4");
  const int shift = kNumBlocks + 1 - level;
  require(h >= (1 << shift) && w >= (1 << shift), "spatial size too small for latent level");
  return {round_div_pow2_half_even(h, shift), round_div_pow2_half_even(w, shift)};
}

/// Spatial size of the features leaving block `block` (0-based): the next
/// latent level, or the full frame after the last block.
inline std::pair<int, int> block_output_shape(const ModelConfig& cfg, int block) {
  if (block + 1 == kNumBlocks) return {cfg.height, cfg.width};
  return latent_shape(block + 2, cfg.height, cfg.width);
}

/// K[a, i, :, :] = sum_j coeffs[a, i, j] * basis[j, :, :].
/// coeffs: A x C_in x r, basis: r x k x k.
inline Tensor compose_spatial_kernel(const Tensor& coeffs, const Tensor& basis) {
  require(coeffs.rank() == 3 && basis.rank() == 3, "compose_spatial_kernel: expected rank-3 inputs");
  require(coeffs.dim(2) == basis.dim(0), "compose_spatial_kernel: rank mismatch " + coeffs.shape_string() +
                                             " vs " + basis.shape_string());
  const int a = coeffs.dim(0), cin = coeffs.dim(1), r = basis.dim(0), k = basis.dim(1);
  layers::ConstMatrixMap<float> w(coeffs.data(), static_cast<long>(a) * cin, r);
  layers::ConstMatrixMap<float> b(basis.data(), r, static_cast<long>(k) * k);
  Tensor out({a, cin, k, k});
  layers::MatrixMap<float>(out.data(), static_cast<long>(a) * cin, static_cast<long>(k) * k).noalias() = w * b;
  return out;
}

/// Parameters of one modulated convolution, as consumed by the forward pass.
struct BlockWeights {
  Tensor basis;       // r x k x k
  Tensor spatial;     // C_S x C_in x r
  Tensor horizontal;  // U x C_in x r
  Tensor vertical;    // V x C_in x r
  Tensor bias_u;      // U x C_out
  Tensor bias_v;      // V x C_out
};

struct ModulatedKernel {
  Tensor kernel;            // C_out x C_in x k x k
  std::vector<float> bias;  // C_out
};

/// Coefficients of the view-(u, v) kernel: rows [W_S; W_u[u]; W_v[v]], C_out x C_in x r.
inline Tensor modulated_coefficients(const BlockWeights& p, AngularCoord c) {
  const int views_u = p.horizontal.dim(0), views_v = p.vertical.dim(0);
  require(c.u >= 0 && c.u < views_u && c.v >= 0 && c.v < views_v, "angular coordinate out of range");
  const int cs = p.spatial.dim(0), cin = p.spatial.dim(1), r = p.spatial.dim(2);
  Tensor coeffs({cs + 2, cin, r});
  const std::size_t row = static_cast<std::size_t>(cin) * r;
  std::copy(p.spatial.values().begin(), p.spatial.values().end(), coeffs.data());
  std::copy_n(p.horizontal.data() + c.u * row, row, coeffs.data() + cs * row);
  std::copy_n(p.vertical.data() + c.v * row, row, coeffs.data() + (cs + 1) * row);
  return coeffs;
}

inline std::vector<float> modulated_bias(const BlockWeights& p, AngularCoord c) {
  const int cout = p.bias_u.dim(1);
  std::vector<float> bias(static_cast<std::size_t>(cout));
  for (int o = 0; o < cout; ++o) {
    bias[o] = p.bias_u[static_cast<std::size_t>(c.u) * cout + o] + p.bias_v[static_cast<std::size_t>(c.v) * cout + o];
  }
  return bias;
}

/// Kernel for view (u, v): [K_S; W_u[u] (x) B; W_v[v] (x) B] stacked on the output
/// axis, bias b_u[u] + b_v[v].
inline ModulatedKernel build_modulated_kernel(const BlockWeights& p, AngularCoord c) {
  return {compose_spatial_kernel(modulated_coefficients(p, c), p.basis), modulated_bias(p, c)};
}

/// Per-channel affine replacing batch normalization at inference.
struct ChannelAffine {
  std::vector<float> scale;
  std::vector<float> shift;
};

struct HeadWeights {
  Tensor kernel;  // 3 x C_out x k_h x k_h
  Tensor bias;    // 3
};

/// Everything an inference forward pass needs.
struct DecoderNetwork {
  ModelConfig config;
  std::array<BlockWeights, kNumBlocks> blocks;
  std::array<ChannelAffine, kNumBlocks> norms;
  HeadWeights head;
};

/// Modulated convolution followed by the resize to the next level, before
/// normalization. `f_prev` is empty for the first block.
inline Tensor hsm_block_preactivation(const DecoderNetwork& net, int block, const Tensor& f_prev,
                                      const Tensor& latent, AngularCoord coord) {
  const ModelConfig& cfg = net.config;
  require(block >= 0 && block < kNumBlocks, "block index out of range");
  require(latent.rank() == 3, "latent must be C_l x h x w");
  const int h = latent.dim(1), w = latent.dim(2);
  const int prev_c = f_prev.empty() ? 0 : f_prev.dim(0);
  if (!f_prev.empty()) {
    require(f_prev.dim(1) == h && f_prev.dim(2) == w, "spatial mismatch between features and latent code");
  }
  const int cin = prev_c + latent.dim(0);
  require(cin == cfg.in_channels(block), "block " + std::to_string(block) + " expects " +
                                             std::to_string(cfg.in_channels(block)) + " input channels");
  Tensor x({cin, h, w});
  std::copy(f_prev.values().begin(), f_prev.values().end(), x.data());
  std::copy(latent.values().begin(), latent.values().end(), x.data() + f_prev.size());

  const ModulatedKernel mk = build_modulated_kernel(net.blocks[block], coord);
  const int cout = cfg.out_channels();
  Tensor conv({cout, h, w});
  layers::conv2d_forward(x.data(), mk.kernel.data(), mk.bias.data(), {cin, cout, h, w, cfg.kernel_size},
                         conv.data());
  const auto [oh, ow] = block_output_shape(cfg, block);
  Tensor out({cout, oh, ow});
  layers::upsample_nearest(conv.data(), cout, h, w, oh, ow, out.data());
  return out;
}

/// One hierarchical block in inference mode:
/// GELU(affine(upsample(modconv(concat(f_prev, latent), coord)))).
inline Tensor hsm_block_forward(const DecoderNetwork& net, int block, const Tensor& f_prev, const Tensor& latent,
                                AngularCoord coord) {
  Tensor out = hsm_block_preactivation(net, block, f_prev, latent, coord);
  const auto& norm = net.norms[block];
  const int cout = out.dim(0);
  const std::size_t plane = static_cast<std::size_t>(out.dim(1)) * out.dim(2);
  for (int c = 0; c < cout; ++c) {
    float* p = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] = layers::gelu(p[i] * norm.scale[c] + norm.shift[c]);
  }
  return out;
}

/// Renders one view as a 3 x H x W tensor in [0, 1].
inline Tensor sanr_forward(const DecoderNetwork& net, AngularCoord coord, const std::array<Tensor, kNumBlocks>& latents) {
  const ModelConfig& cfg = net.config;
  Tensor f;
  for (int i = 0; i < kNumBlocks; ++i) {
    const auto [lh, lw] = latent_shape(i + 1, cfg.height, cfg.width);
    require(latents[i].rank() == 3 && latents[i].dim(1) == lh && latents[i].dim(2) == lw,
            "latent level " + std::to_string(i + 1) + " has the wrong shape");
    f = hsm_block_forward(net, i, f, latents[i], coord);
  }
  Tensor out({3, cfg.height, cfg.width});
  layers::conv2d_forward(f.data(), net.head.kernel.data(), net.head.bias.data(),
                         {cfg.out_channels(), 3, cfg.height, cfg.width, cfg.head_kernel_size}, out.data());
  for (auto& v : out.storage()) v = std::clamp(layers::sigmoid(v), 0.0f, 1.0f);
  return out;
}

/// 3 x H x W in [0, 1] -> 8-bit interleaved RGB.
inline Image to_image(const Tensor& chw) {
  const int h = chw.dim(1), w = chw.dim(2);
  Image img(h, w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const float v = std::clamp(chw[c * plane + i], 0.0f, 1.0f);
      img.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return img;
}

/// 8-bit view -> 3 x H x W in [0, 1].
inline Tensor to_tensor(const Image& img) {
  Tensor t({3, img.height, img.width});
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) t[c * plane + i] = img.rgb[i * 3 + c] / 255.0f;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Trainable state

/// Indices of the five quantization-aware tensors inside a block.
enum class QatTensor { kSpatial = 0, kHorizontal = 1, kVertical = 2, kBiasU = 3, kBiasV = 4 };
inline constexpr int kQatTensorsPerBlock = 5;

struct HsmBlockParams {
  BlockWeights weights;
  Tensor bn_gamma;  // C_out
  Tensor bn_beta;   // C_out
  /// Fixed grid step of each QAT tensor, indexed by QatTensor.
  std::array<float, kQatTensorsPerBlock> qat_scale{};

  Tensor& qat(int i) {
    switch (static_cast<QatTensor>(i)) {
      case QatTensor::kSpatial: return weights.spatial;
      case QatTensor::kHorizontal: return weights.horizontal;
      case QatTensor::kVertical: return weights.vertical;
      case QatTensor::kBiasU: return weights.bias_u;
      default: return weights.bias_v;
    }
  }
  const Tensor& qat(int i) const { return const_cast<HsmBlockParams*>(this)->qat(i); }
};

/// All learnable state of the representation.
struct SanrModel {
  ModelConfig config;
  std::array<HsmBlockParams, kNumBlocks> blocks;
  std::array<Tensor, kNumBlocks> latents;  // C_l x h_i x w_i
  HeadWeights head;
  std::array<ContextModelParams, kNumBlocks> context;

  /// Visits every trainable tensor in a fixed order.
  template <typename F>
  void for_each_parameter(F&& f) {
    for (auto& b : blocks) {
      f(b.weights.basis), f(b.weights.spatial), f(b.weights.horizontal), f(b.weights.vertical);
      f(b.weights.bias_u), f(b.weights.bias_v), f(b.bn_gamma), f(b.bn_beta);
    }
    for (auto& l : latents) f(l);
    f(head.kernel), f(head.bias);
    for (auto& c : context) c.for_each(f);
  }

  /// Same structure, all zeros. Used as a gradient accumulator.
  SanrModel zeros_like() const {
    SanrModel z = *this;
    z.for_each_parameter([](Tensor& t) { t.fill(0.0f); });
    return z;
  }
};

struct ParameterCounts {
  std::size_t qat = 0;       // W_S, W_u, W_v, b_u, b_v over all blocks
  std::size_t minor = 0;     // bases, normalization, head, context models
  std::size_t latents = 0;

  double qat_share() const { return static_cast<double>(qat) / static_cast<double>(qat + minor); }
};

inline ParameterCounts count_parameters(const ModelConfig& cfg) {
  ParameterCounts n;
  const std::size_t k2 = static_cast<std::size_t>(cfg.kernel_size) * cfg.kernel_size;
  const std::size_t cout = cfg.out_channels();
  for (int i = 0; i < kNumBlocks; ++i) {
    const std::size_t cin = cfg.in_channels(i);
    n.qat += (cfg.spatial_channels + cfg.views_u + cfg.views_v) * cin * cfg.rank;
    n.qat += (cfg.views_u + cfg.views_v) * cout;
    n.minor += cfg.rank * k2 + 2 * cout;
    const auto [h, w] = latent_shape(i + 1, cfg.height, cfg.width);
    n.latents += static_cast<std::size_t>(cfg.latent_channels) * h * w;
  }
  const std::size_t hk = cfg.head_kernel_size;
  n.minor += 3 * cout * hk * hk + 3;
  const std::size_t c = cfg.context_channels;
  n.minor += kNumBlocks * ((c * 9 + c) + (c * c * 9 + c) + (2 * c * 9 + 2));
  return n;
}

inline float qat_scale_for(const Tensor& t) {
  double mean = 0, sq = 0;
  for (float v : t.values()) mean += v;
  mean /= static_cast<double>(t.size());
  for (float v : t.values()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(t.size()));
  return static_cast<float>(sd > 0 ? sd / 32.0 : 1e-3 / 32.0);
}

/// Fan-in scaled uniform initialization; latents ~ N(0, 0.01^2). QAT grid steps
/// are frozen here at std(w_init) / 32.
inline SanrModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  auto uniform = [&](Tensor& t, double bound) {
    for (auto& v : t.storage()) v = static_cast<float>(rng.uniform(-bound, bound));
  };
  SanrModel m;
  m.config = cfg;
  const int k = cfg.kernel_size, r = cfg.rank, cout = cfg.out_channels();
  const double sqrt3 = std::sqrt(3.0);
  for (int i = 0; i < kNumBlocks; ++i) {
    const int cin = cfg.in_channels(i);
    auto& b = m.blocks[i];
    b.weights.basis = Tensor({r, k, k});
    b.weights.spatial = Tensor({cfg.spatial_channels, cin, r});
    b.weights.horizontal = Tensor({cfg.views_u, cin, r});
    b.weights.vertical = Tensor({cfg.views_v, cin, r});
    b.weights.bias_u = Tensor({cfg.views_u, cout});
    b.weights.bias_v = Tensor({cfg.views_v, cout});
    // Var(K) = r * Var(W) * Var(B) = 1 / (C_in k^2).
    uniform(b.weights.basis, sqrt3 / k);
    const double coeff_bound = sqrt3 / std::sqrt(static_cast<double>(cin) * r);
    uniform(b.weights.spatial, coeff_bound);
    uniform(b.weights.horizontal, coeff_bound);
    uniform(b.weights.vertical, coeff_bound);
    const double bias_bound = 0.5 / std::sqrt(static_cast<double>(cin) * k * k);
    uniform(b.weights.bias_u, bias_bound);
    uniform(b.weights.bias_v, bias_bound);
    b.bn_gamma = Tensor({cout}, 1.0f);
    b.bn_beta = Tensor({cout}, 0.0f);
    for (int q = 0; q < kQatTensorsPerBlock; ++q) b.qat_scale[q] = qat_scale_for(b.qat(q));

    const auto [lh, lw] = latent_shape(i + 1, cfg.height, cfg.width);
    m.latents[i] = Tensor({cfg.latent_channels, lh, lw});
    for (auto& v : m.latents[i].storage()) v = static_cast<float>(0.01 * rng.normal());
  }
  const int hk = cfg.head_kernel_size;
  m.head.kernel = Tensor({3, cout, hk, hk});
  m.head.bias = Tensor({3});
  const double head_bound = 1.0 / std::sqrt(static_cast<double>(cout) * hk * hk);
  uniform(m.head.kernel, head_bound);
  uniform(m.head.bias, head_bound);
  for (auto& c : m.context) c = init_context_model(cfg.context_channels, rng);
  return m;
}

}  // namespace sanr
