#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sanr/evaluation.hpp"
#include "sanr/frozen_model.hpp"
#include "sanr/quantization.hpp"

namespace sanr {

struct StepInfo {
  long iteration = 0;
  bool sga = false;
  bool rate_term = false;
  double temperature = 0.0;  // SGA only
  double loss = 0.0;
  double mse = 0.0;
};

struct TrainConfig {
  double lambda = 0.0;
  double lr_init = 0.01;
  int max_epochs = 30;
  int sga_epochs = 6;
  int samples_per_sai = 500;
  int batch_views = 5;
  int rd_update_period = 5;
  int plateau_patience = 2;
  int lr_halvings_max = 2;
  std::uint64_t seed = 0;
  bool fast_preset = false;
  long max_iterations = 0;      // 0: no cap on QAT iterations
  long max_sga_iterations = 0;  // 0: no cap on SGA iterations
  double bn_eps = 1e-5;
  std::function<void(const StepInfo&)> on_step;

  void validate() const {
    require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be finite and non-negative");
    require(lr_init > 0.0, "learning rate must be positive");
    require(max_epochs >= 1 && sga_epochs >= 0 && samples_per_sai >= 1 && batch_views >= 1, "counts must be positive");
    require(rd_update_period >= 1 && plateau_patience >= 1 && lr_halvings_max >= 0, "schedule counts must be positive");
  }
};

struct EpochRecord {
  int epoch = 0;
  std::string phase;
  long iterations = 0;  // cumulative
  double mse = 0.0;     // mean per-view MSE on the [0, 1] scale
  double psnr = 0.0;
  double rate_latent_bits = 0.0;
  double rate_weight_bits = 0.0;
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  long iterations = 0;
  long sga_iterations = 0;
  long rate_steps = 0;
  long entropy_evaluations = 0;
  int lr_halvings = 0;
  double final_lr = 0.0;
  std::string stop_reason;
  double wall_seconds = 0.0;

  double final_psnr = 0.0;
  double final_bpp = 0.0;
  double estimated_latent_bits = 0.0;
  double estimated_weight_bits = 0.0;
  std::size_t stream_bytes = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os << "epoch,phase,iterations,mse,psnr_db,rate_latent_bits,rate_weight_bits,loss,lr\n";
    os.precision(10);
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.phase << ',' << e.iterations << ',' << e.mse << ',' << e.psnr << ','
         << e.rate_latent_bits << ',' << e.rate_weight_bits << ',' << e.loss << ',' << e.lr << '\n';
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : epochs) {
      j["epochs"].push_back({{"epoch", e.epoch}, {"phase", e.phase}, {"iterations", e.iterations}, {"mse", e.mse},
                             {"psnr_db", e.psnr}, {"rate_latent_bits", e.rate_latent_bits},
                             {"rate_weight_bits", e.rate_weight_bits}, {"loss", e.loss}, {"lr", e.lr},
                             {"seconds", e.seconds}});
    }
    j["iterations"] = iterations;
    j["sga_iterations"] = sga_iterations;
    j["rate_steps"] = rate_steps;
    j["lr_halvings"] = lr_halvings;
    j["final_lr"] = final_lr;
    j["stop_reason"] = stop_reason;
    j["wall_seconds"] = wall_seconds;
    j["final"] = {{"psnr_db", final_psnr},
                  {"bpp", final_bpp},
                  {"stream_bytes", stream_bytes},
                  {"estimated_latent_bits", estimated_latent_bits},
                  {"estimated_weight_bits", estimated_weight_bits}};
    return j;
  }
};

/// Sum over views of the per-view mean squared error.
inline double mse_loss(std::span<const Tensor> x, std::span<const Tensor> x_hat) {
  require(x.size() == x_hat.size(), "batch size mismatch");
  double total = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    require(x[n].shape() == x_hat[n].shape(), "view shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < x[n].size(); ++i) {
      const double d = static_cast<double>(x[n][i]) - x_hat[n][i];
      acc += d * d;
    }
    total += acc / static_cast<double>(x[n].size());
  }
  return total;
}

inline double rd_loss(double mse, double r_latents, double r_weights, double lambda) {
  return mse + lambda * (r_latents + r_weights);
}

// ---------------------------------------------------------------------------
// Rate estimates of a finalized model

struct RateBreakdown {
  double latent_bits = 0.0;
  double weight_bits = 0.0;
  std::array<std::array<double, kQatTensorsPerBlock>, kNumBlocks> weight_tensor_bits{};
  std::array<double, kNumBlocks> latent_level_bits{};
};

inline double weight_rate_bits(const QuantizedTensor& q) {
  const auto ints = q.int_values();
  return laplace_rate(ints, {q.laplace_mu, q.laplace_b}).bits;
}

inline double latent_level_rate_bits(const QuantizedLatent& y, const ContextModelParams& ctx) {
  return latent_rate(y.values_d(), ctx, y.first_channel()).bits;
}

inline RateBreakdown estimate_rates(const FrozenModel& m) {
  RateBreakdown r;
  for (int b = 0; b < kNumBlocks; ++b) {
    for (int s = 0; s < kQatTensorsPerBlock; ++s) {
      r.weight_tensor_bits[b][s] = weight_rate_bits(m.blocks[b].qat[s]);
      r.weight_bits += r.weight_tensor_bits[b][s];
    }
  }
  if (m.latents) {
    for (int l = 0; l < kNumBlocks; ++l) {
      const ContextModelParams ctx =
          m.config.latent_channels > 1 ? m.context[l].dequantize() : ContextModelParams{};
      r.latent_level_bits[l] = latent_level_rate_bits((*m.latents)[l], ctx);
      r.latent_bits += r.latent_level_bits[l];
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Finalization

/// How the QAT tensors are put on their integer grid.
enum class WeightGrid {
  kTrained,       // the fixed QAT step chosen at initialization
  kSymmetric8Bit  // post-training max|w| / 127
};

inline QuantizedTensor quantize_with_stats(const Tensor& w, float scale) {
  QuantizedTensor q = quantize_tensor(w, scale);
  const auto ints = q.int_values();
  const LaplaceParams p = fit_laplace(ints);
  q.laplace_mu = static_cast<float>(p.mu);
  q.laplace_b = static_cast<float>(p.b);
  return q;
}

inline float symmetric8_scale(const Tensor& w) {
  float peak = 0.0f;
  for (float v : w.values()) peak = std::max(peak, std::abs(v));
  return peak > 0.0f ? peak / 127.0f : 1.0f;
}

/// Freezes a trained model: integer weights and latents, 16-bit minor tensors,
/// and normalization folded into a per-channel affine using statistics over
/// all views of the light field (computed block by block through the already
/// frozen earlier blocks).
inline FrozenModel finalize_model(const SanrModel& model, const LightField& lf, double bn_eps,
                                  WeightGrid grid = WeightGrid::kTrained,
                                  std::optional<std::uint64_t> noise_seed = std::nullopt) {
  const ModelConfig& cfg = model.config;
  FrozenModel fm;
  fm.config = cfg;
  for (int b = 0; b < kNumBlocks; ++b) {
    const auto& src = model.blocks[b];
    for (int s = 0; s < kQatTensorsPerBlock; ++s) {
      const float scale = grid == WeightGrid::kTrained ? src.qat_scale[s] : symmetric8_scale(src.qat(s));
      fm.blocks[b].qat[s] = quantize_with_stats(src.qat(s), scale);
    }
    fm.blocks[b].basis = ptq_uniform16(src.weights.basis);
  }
  fm.head_kernel = ptq_uniform16(model.head.kernel);
  fm.head_bias = ptq_uniform16(model.head.bias);
  if (noise_seed) {
    fm.noise_seed = noise_seed;
  } else {
    std::array<QuantizedLatent, kNumBlocks> latents;
    for (int l = 0; l < kNumBlocks; ++l) {
      QuantizedLatent& y = latents[l];
      y.shape = model.latents[l].shape();
      y.ints.reserve(model.latents[l].size());
      for (float v : model.latents[l].values()) y.ints.push_back(quantize_to_int(v, 1.0));
      const std::size_t plane = y.ints.size() / static_cast<std::size_t>(y.shape[0]);
      const std::vector<double> first(y.ints.begin(), y.ints.begin() + static_cast<long>(plane));
      const LaplaceParams p = fit_laplace(first);
      y.first_mu = static_cast<float>(p.mu);
      y.first_b = static_cast<float>(p.b);
      if (cfg.latent_channels > 1) fm.context[l] = ptq_context(model.context[l]);
    }
    fm.latents = std::move(latents);
  }

  // Normalization statistics, one block at a time.
  for (int b = 0; b < kNumBlocks; ++b) {
    fm.blocks[b].bn_scale = ptq_uniform16(Tensor({cfg.out_channels()}, 1.0f));
    fm.blocks[b].bn_shift = ptq_uniform16(Tensor({cfg.out_channels()}, 0.0f));
  }
  DecoderNetwork net = decoder_network(fm);
  const auto inputs = latent_inputs(fm);
  const int cout = cfg.out_channels();
  for (int b = 0; b < kNumBlocks; ++b) {
    std::vector<double> sum(static_cast<std::size_t>(cout)), sq(static_cast<std::size_t>(cout));
    double count = 0.0;
    for (int i = 0; i < lf.view_count(); ++i) {
      const AngularCoord c = lf.coord(static_cast<std::size_t>(i));
      Tensor f;
      for (int p = 0; p < b; ++p) f = hsm_block_forward(net, p, f, inputs[p], c);
      const Tensor pre = hsm_block_preactivation(net, b, f, inputs[b], c);
      const std::size_t plane = pre.size() / static_cast<std::size_t>(cout);
      for (int ch = 0; ch < cout; ++ch) {
        const float* v = pre.data() + ch * plane;
        for (std::size_t k = 0; k < plane; ++k) sum[ch] += v[k], sq[ch] += static_cast<double>(v[k]) * v[k];
      }
      count += static_cast<double>(plane);
    }
    Tensor scale({cout}), shift({cout});
    for (int ch = 0; ch < cout; ++ch) {
      const double mean = sum[ch] / count;
      const double var = std::max(0.0, sq[ch] / count - mean * mean);
      const double s = model.blocks[b].bn_gamma[ch] / std::sqrt(var + bn_eps);
      scale[ch] = static_cast<float>(s);
      shift[ch] = static_cast<float>(model.blocks[b].bn_beta[ch] - mean * s);
    }
    fm.blocks[b].bn_scale = ptq_uniform16(scale);
    fm.blocks[b].bn_shift = ptq_uniform16(shift);
    const Tensor ds = fm.blocks[b].bn_scale.dequantize(), dh = fm.blocks[b].bn_shift.dequantize();
    net.norms[b].scale.assign(ds.values().begin(), ds.values().end());
    net.norms[b].shift.assign(dh.values().begin(), dh.values().end());
  }
  return fm;
}

/// Distortion and estimated rate of a finalized model. `loss` is the
/// rate-distortion objective for a batch of `batch_views` views:
/// batch_views * MSE + lambda * (R_y + R_w) / (U V H W).
struct RdEvaluation {
  double mse = 0.0;
  double psnr = 0.0;
  double latent_bits = 0.0;
  double weight_bits = 0.0;
  double loss = 0.0;
};

inline RdEvaluation evaluate_rd(const FrozenModel& fm, const LightField& lf, double lambda, int batch_views,
                                bool with_rate = true) {
  const LightField recon = reconstruct(fm);
  RdEvaluation e;
  const PsnrResult p = psnr(lf, recon);
  e.psnr = p.mean;
  for (std::size_t i = 0; i < lf.views().size(); ++i) e.mse += image_mse(lf.views()[i], recon.views()[i]);
  e.mse /= static_cast<double>(lf.views().size()) * 255.0 * 255.0;
  if (with_rate) {
    const RateBreakdown r = estimate_rates(fm);
    e.latent_bits = r.latent_bits;
    e.weight_bits = r.weight_bits;
  }
  const double pixels = static_cast<double>(lf.view_count()) * lf.height() * lf.width();
  e.loss = rd_loss(batch_views * e.mse, e.latent_bits / pixels, e.weight_bits / pixels, lambda);
  return e;
}

// ---------------------------------------------------------------------------
// Optimization

enum class LatentMode { kNoise, kSga, kFixed };

namespace detail {

inline Tensor& qat_slot(BlockWeights& w, int i) {
  switch (i) {
    case 0: return w.spatial;
    case 1: return w.horizontal;
    case 2: return w.vertical;
    case 3: return w.bias_u;
    default: return w.bias_v;
  }
}

class Adam {
 public:
  Adam(SanrModel& params, SanrModel& grads) : m_(params.zeros_like()), v_(params.zeros_like()) {
    params.for_each_parameter([&](Tensor& t) { p_.push_back(&t); });
    grads.for_each_parameter([&](Tensor& t) { g_.push_back(&t); });
    m_.for_each_parameter([&](Tensor& t) { mp_.push_back(&t); });
    v_.for_each_parameter([&](Tensor& t) { vp_.push_back(&t); });
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < p_.size(); ++k) {
      float* p = p_[k]->data();
      const float* g = g_[k]->data();
      float* m = mp_[k]->data();
      float* v = vp_[k]->data();
      for (std::size_t i = 0; i < p_[k]->size(); ++i) {
        m[i] = static_cast<float>(kBeta1 * m[i] + (1 - kBeta1) * g[i]);
        v[i] = static_cast<float>(kBeta2 * v[i] + (1 - kBeta2) * static_cast<double>(g[i]) * g[i]);
        p[i] -= static_cast<float>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps));
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  SanrModel m_, v_;
  std::vector<Tensor*> p_, g_, mp_, vp_;
  long t_ = 0;
};

struct StepResult {
  double mse = 0.0;  // summed over the batch
  double latent_bits = 0.0;
  double weight_bits = 0.0;
  double loss = 0.0;
};

/// One optimizer step's worth of forward and backward passes.
class Engine {
 public:
  Engine(const LightField& lf, SanrModel& model, bool quantize_weights, double lambda, double bn_eps)
      : model_(model), grads_(model.zeros_like()), quantize_weights_(quantize_weights), lambda_(lambda),
        bn_eps_(static_cast<float>(bn_eps)) {
    for (const auto& img : lf.views()) targets_.push_back(to_tensor(img));
    pixels_ = static_cast<double>(lf.view_count()) * lf.height() * lf.width();
    views_v_ = lf.views_v();
  }

  SanrModel& grads() { return grads_; }
  long entropy_evaluations() const { return entropy_evaluations_; }

  StepResult run(const std::vector<AngularCoord>& coords, LatentMode mode, double tau, bool use_rate, Rng& rng) {
    const ModelConfig& cfg = model_.config;
    grads_.for_each_parameter([](Tensor& t) { t.fill(0.0f); });
    const int n_views = static_cast<int>(coords.size());
    const int cout = cfg.out_channels(), k = cfg.kernel_size, r = cfg.rank, cs = cfg.spatial_channels;

    // Quantized forward values.
    std::array<BlockWeights, kNumBlocks> eff;
    for (int b = 0; b < kNumBlocks; ++b) {
      eff[b] = model_.blocks[b].weights;
      if (quantize_weights_) {
        for (int s = 0; s < kQatTensorsPerBlock; ++s) {
          qat_slot(eff[b], s) = ste_round(model_.blocks[b].qat(s), model_.blocks[b].qat_scale[s]);
        }
      }
    }
    std::array<Tensor, kNumBlocks> y_eff, y_factor;
    for (int l = 0; l < kNumBlocks; ++l) {
      switch (mode) {
        case LatentMode::kNoise: y_eff[l] = add_uniform_noise(model_.latents[l], rng); break;
        case LatentMode::kSga: {
          auto s = sga_sample(model_.latents[l], tau, rng);
          y_eff[l] = std::move(s.hard);
          y_factor[l] = std::move(s.grad);
          break;
        }
        case LatentMode::kFixed: y_eff[l] = model_.latents[l]; break;
      }
    }

    // Forward.
    struct Tape {
      Tensor x, z;
      std::vector<Tensor> coeffs, kernels;
      std::vector<std::vector<float>> biases;
      layers::BatchNormCache<float> bn;
    };
    std::array<Tape, kNumBlocks> tape;
    Tensor f;
    for (int b = 0; b < kNumBlocks; ++b) {
      auto& t = tape[b];
      const auto [h, w] = latent_shape(b + 1, cfg.height, cfg.width);
      const auto [oh, ow] = block_output_shape(cfg, b);
      const int cin = cfg.in_channels(b), prev_c = b ? cout : 0;
      const std::size_t in_plane = static_cast<std::size_t>(h) * w, out_plane = static_cast<std::size_t>(oh) * ow;
      t.x = Tensor({n_views, cin, h, w});
      Tensor u({n_views, cout, oh, ow}), conv({cout, h, w});
      for (int n = 0; n < n_views; ++n) {
        float* xn = t.x.data() + static_cast<std::size_t>(n) * cin * in_plane;
        if (prev_c) std::copy_n(f.data() + static_cast<std::size_t>(n) * prev_c * in_plane, prev_c * in_plane, xn);
        std::copy(y_eff[b].values().begin(), y_eff[b].values().end(), xn + prev_c * in_plane);
        t.coeffs.push_back(modulated_coefficients(eff[b], coords[n]));
        t.kernels.push_back(compose_spatial_kernel(t.coeffs.back(), eff[b].basis));
        t.biases.push_back(modulated_bias(eff[b], coords[n]));
        layers::conv2d_forward(xn, t.kernels.back().data(), t.biases.back().data(), {cin, cout, h, w, k}, conv.data());
        layers::upsample_nearest(conv.data(), cout, h, w, oh, ow, u.data() + static_cast<std::size_t>(n) * cout * out_plane);
      }
      t.z = Tensor(u.shape());
      layers::batchnorm_forward(u.data(), n_views, cout, static_cast<long>(out_plane), model_.blocks[b].bn_gamma.data(),
                                model_.blocks[b].bn_beta.data(), bn_eps_, t.z.data(), t.bn);
      f = Tensor(t.z.shape());
      for (std::size_t i = 0; i < f.size(); ++i) f[i] = layers::gelu(t.z[i]);
    }

    // Head and distortion.
    const int hk = cfg.head_kernel_size;
    const std::size_t frame = static_cast<std::size_t>(cfg.height) * cfg.width;
    const layers::ConvShape head_shape{cout, 3, cfg.height, cfg.width, hk};
    Tensor df(f.shape()), out({3, cfg.height, cfg.width}), dlogit({3, cfg.height, cfg.width});
    StepResult res;
    for (int n = 0; n < n_views; ++n) {
      const float* fn = f.data() + static_cast<std::size_t>(n) * cout * frame;
      layers::conv2d_forward(fn, model_.head.kernel.data(), model_.head.bias.data(), head_shape, out.data());
      const Tensor& target = targets_[static_cast<std::size_t>(coords[n].u) * views_v_ + coords[n].v];
      double acc = 0.0;
      const double norm = 2.0 / static_cast<double>(out.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        const float s = layers::sigmoid(out[i]);
        const double d = static_cast<double>(s) - target[i];
        acc += d * d;
        dlogit[i] = static_cast<float>(norm * d * s * (1.0f - s));
      }
      res.mse += acc / static_cast<double>(out.size());
      layers::conv2d_backward(fn, model_.head.kernel.data(), dlogit.data(), head_shape,
                              df.data() + static_cast<std::size_t>(n) * cout * frame, grads_.head.kernel.data(),
                              grads_.head.bias.data());
    }

    // Backward through the blocks.
    std::array<Tensor, kNumBlocks> dy;
    for (int b = kNumBlocks - 1; b >= 0; --b) {
      auto& t = tape[b];
      auto& g = grads_.blocks[b];
      const auto [h, w] = latent_shape(b + 1, cfg.height, cfg.width);
      const auto [oh, ow] = block_output_shape(cfg, b);
      const int cin = cfg.in_channels(b), prev_c = b ? cout : 0;
      const std::size_t in_plane = static_cast<std::size_t>(h) * w, out_plane = static_cast<std::size_t>(oh) * ow;
      for (std::size_t i = 0; i < df.size(); ++i) df[i] *= layers::gelu_derivative(t.z[i]);
      Tensor du(df.shape());
      layers::batchnorm_backward(df.data(), model_.blocks[b].bn_gamma.data(), t.bn, du.data(), g.bn_gamma.data(),
                                 g.bn_beta.data());
      Tensor df_prev = prev_c ? Tensor({n_views, prev_c, h, w}) : Tensor();
      dy[b] = Tensor(model_.latents[b].shape());
      Tensor dconv({cout, h, w}), dx({cin, h, w}), dk({cout, cin, k, k});
      std::vector<float> dbias(static_cast<std::size_t>(cout));
      Tensor dcoeffs({cout, cin, r});
      for (int n = 0; n < n_views; ++n) {
        dconv.fill(0.0f), dx.fill(0.0f), dk.fill(0.0f);
        std::fill(dbias.begin(), dbias.end(), 0.0f);
        layers::upsample_nearest_backward(du.data() + static_cast<std::size_t>(n) * cout * out_plane, cout, h, w, oh, ow,
                                          dconv.data());
        layers::conv2d_backward(t.x.data() + static_cast<std::size_t>(n) * cin * in_plane, t.kernels[n].data(),
                                dconv.data(), {cin, cout, h, w, k}, dx.data(), dk.data(), dbias.data());
        const long rows = static_cast<long>(cout) * cin;
        layers::ConstMatrixMap<float> dk_m(dk.data(), rows, k * k);
        layers::ConstMatrixMap<float> basis_m(eff[b].basis.data(), r, k * k);
        layers::MatrixMap<float>(dcoeffs.data(), rows, r).noalias() = dk_m * basis_m.transpose();
        layers::MatrixMap<float>(g.weights.basis.data(), r, k * k).noalias() +=
            layers::ConstMatrixMap<float>(t.coeffs[n].data(), rows, r).transpose() * dk_m;
        const std::size_t row = static_cast<std::size_t>(cin) * r;
        const AngularCoord c = coords[n];
        for (std::size_t i = 0; i < cs * row; ++i) g.weights.spatial[i] += dcoeffs[i];
        for (std::size_t i = 0; i < row; ++i) {
          g.weights.horizontal[c.u * row + i] += dcoeffs[cs * row + i];
          g.weights.vertical[c.v * row + i] += dcoeffs[(cs + 1) * row + i];
        }
        for (int o = 0; o < cout; ++o) {
          g.weights.bias_u[static_cast<std::size_t>(c.u) * cout + o] += dbias[o];
          g.weights.bias_v[static_cast<std::size_t>(c.v) * cout + o] += dbias[o];
        }
        if (prev_c) std::copy_n(dx.data(), prev_c * in_plane, df_prev.data() + static_cast<std::size_t>(n) * prev_c * in_plane);
        for (std::size_t i = 0; i < dy[b].size(); ++i) dy[b][i] += dx[prev_c * in_plane + i];
      }
      df = std::move(df_prev);
    }

    // Rate.
    if (use_rate) {
      const double weight_scale = lambda_ / pixels_;
      for (int b = 0; b < kNumBlocks; ++b) {
        for (int s = 0; s < kQatTensorsPerBlock; ++s) {
          const Tensor& wt = model_.blocks[b].qat(s);
          const double step = model_.blocks[b].qat_scale[s];
          std::vector<double> ints(wt.size());
          for (std::size_t i = 0; i < wt.size(); ++i) ints[i] = quantize_to_int(wt[i], step);
          const LaplaceParams p = fit_laplace(ints);
          Tensor& gw = grads_.blocks[b].qat(s);
          for (std::size_t i = 0; i < ints.size(); ++i) {
            const SymbolCost cost = laplace_symbol_cost(ints[i], p.mu, p.b);
            res.weight_bits += cost.bits;
            gw[i] += static_cast<float>(weight_scale * cost.d_x / step);
          }
        }
      }
      for (int l = 0; l < kNumBlocks; ++l) {
        const TensorD y = TensorD::cast(y_eff[l]);
        const std::size_t plane = y.size() / static_cast<std::size_t>(y.dim(0));
        const LaplaceParams first = fit_laplace(std::span<const double>(y.data(), plane));
        const LatentRate lr = latent_rate(y, model_.context[l], first, true);
        res.latent_bits += lr.bits;
        for (std::size_t i = 0; i < y.size(); ++i) dy[l][i] += static_cast<float>(weight_scale * lr.grad[i]);
        if (lr.context_grad) {
          ContextModelParams scaled = ContextModelParams::zeros(model_.context[l].hidden());
          lr.context_grad->add_to(scaled);
          auto& gc = grads_.context[l];
          std::array<Tensor*, 6> dst{&gc.w1, &gc.b1, &gc.w2, &gc.b2, &gc.w3, &gc.b3};
          int idx = 0;
          scaled.for_each([&](Tensor& t) {
            for (std::size_t i = 0; i < t.size(); ++i) (*dst[idx])[i] += static_cast<float>(weight_scale * t[i]);
            ++idx;
          });
        }
      }
      entropy_evaluations_ += 1;
    }

    for (int l = 0; l < kNumBlocks; ++l) {
      Tensor& gl = grads_.latents[l];
      if (mode == LatentMode::kFixed) continue;
      for (std::size_t i = 0; i < gl.size(); ++i) {
        gl[i] = mode == LatentMode::kSga ? dy[l][i] * y_factor[l][i] : dy[l][i];
      }
    }
    res.loss = rd_loss(res.mse, res.latent_bits / pixels_, res.weight_bits / pixels_, use_rate ? lambda_ : 0.0);
    return res;
  }

 private:
  SanrModel& model_;
  SanrModel grads_;
  std::vector<Tensor> targets_;
  bool quantize_weights_;
  double lambda_;
  float bn_eps_;
  double pixels_ = 1.0;
  int views_v_ = 1;
  long entropy_evaluations_ = 0;
};

/// Shuffled view draws for one epoch, cut into batches.
inline std::vector<std::vector<AngularCoord>> epoch_batches(const LightField& lf, const TrainConfig& cfg, Rng& rng) {
  std::vector<AngularCoord> draws;
  draws.reserve(static_cast<std::size_t>(cfg.samples_per_sai) * lf.view_count());
  for (int s = 0; s < cfg.samples_per_sai; ++s)
    for (int i = 0; i < lf.view_count(); ++i) draws.push_back(lf.coord(static_cast<std::size_t>(i)));
  rng.shuffle(draws.begin(), draws.end());
  std::vector<std::vector<AngularCoord>> batches;
  for (std::size_t i = 0; i < draws.size(); i += static_cast<std::size_t>(cfg.batch_views)) {
    const auto end = std::min(draws.size(), i + static_cast<std::size_t>(cfg.batch_views));
    batches.emplace_back(draws.begin() + static_cast<long>(i), draws.begin() + static_cast<long>(end));
  }
  return batches;
}

inline long iterations_per_epoch(const LightField& lf, const TrainConfig& cfg) {
  const long draws = static_cast<long>(cfg.samples_per_sai) * lf.view_count();
  return (draws + cfg.batch_views - 1) / cfg.batch_views;
}

/// Shared loop for the QAT and SGA phases.
struct LoopSpec {
  LatentMode mode = LatentMode::kNoise;
  bool quantize_weights = true;
  int epochs = 1;
  long max_iterations = 0;
  bool plateau = true;
  bool sga = false;
  std::optional<std::uint64_t> noise_seed;  // fixed-input variant
  WeightGrid grid = WeightGrid::kTrained;
};

inline void run_loop(SanrModel& model, const LightField& lf, const TrainConfig& cfg, const LoopSpec& spec,
                     std::uint64_t stream, double lr_start, TrainReport& report) {
  Engine engine(lf, model, spec.quantize_weights, cfg.lambda, cfg.bn_eps);
  Adam adam(model, engine.grads());
  Rng rng(cfg.seed ^ stream);
  const bool rate_active = cfg.lambda > 0.0 && spec.mode != LatentMode::kFixed;
  const long per_epoch = iterations_per_epoch(lf, cfg);
  long total = static_cast<long>(spec.epochs) * per_epoch;
  if (spec.max_iterations > 0) total = std::min(total, spec.max_iterations);
  const SgaSchedule schedule{0.5, 0.02, std::max(1L, total)};
  double lr = lr_start, best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  long done = 0;
  report.stop_reason = spec.sga ? "sga schedule complete" : "epoch limit";
  for (int epoch = 1; epoch <= spec.epochs && done < total; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& batch : epoch_batches(lf, cfg, rng)) {
      if (done >= total) break;
      const long global = report.iterations + report.sga_iterations;
      const bool use_rate = rate_active && (global + 1) % cfg.rd_update_period == 0;
      const double tau = spec.sga ? schedule.temperature(done + 1) : 0.0;
      const StepResult r = engine.run(batch, spec.mode, tau, use_rate, rng);
      if (!std::isfinite(r.loss)) {
        throw DivergenceError("training diverged at iteration " + std::to_string(global + 1) + ": loss is not finite");
      }
      adam.step(lr);
      ++done;
      (spec.sga ? report.sga_iterations : report.iterations) += 1;
      report.rate_steps += use_rate ? 1 : 0;
      if (cfg.on_step) cfg.on_step({global + 1, spec.sga, use_rate, tau, r.loss, r.mse});
    }
    report.entropy_evaluations = engine.entropy_evaluations();

    const FrozenModel fm = finalize_model(model, lf, cfg.bn_eps, spec.grid, spec.noise_seed);
    const RdEvaluation e = evaluate_rd(fm, lf, cfg.lambda, cfg.batch_views, rate_active);
    if (!std::isfinite(e.loss)) throw DivergenceError("evaluation loss is not finite after epoch " + std::to_string(epoch));
    EpochRecord rec;
    rec.epoch = static_cast<int>(report.epochs.size()) + 1;
    rec.phase = spec.sga ? "sga" : "qat";
    rec.iterations = report.iterations + report.sga_iterations;
    rec.mse = e.mse, rec.psnr = e.psnr, rec.rate_latent_bits = e.latent_bits, rec.rate_weight_bits = e.weight_bits;
    rec.loss = e.loss, rec.lr = lr;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);

    if (done >= total && spec.max_iterations > 0 && total == spec.max_iterations) report.stop_reason = "iteration cap";
    if (!spec.plateau) continue;
    if (e.loss < best * (1.0 - 1e-4)) {
      best = e.loss;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.plateau_patience) {
      bad_epochs = 0;
      if (report.lr_halvings >= cfg.lr_halvings_max) {
        report.stop_reason = "learning rate halved a third time";
        break;
      }
      lr *= 0.5;
      ++report.lr_halvings;
    }
  }
  report.final_lr = lr;
}

}  // namespace detail

struct TrainResult {
  SanrModel model;
  TrainReport report;
};

/// Quantization-aware training with noise-relaxed latents.
inline TrainResult train(const LightField& lf, const ModelConfig& mcfg, const TrainConfig& tcfg) {
  lf.validate();
  tcfg.validate();
  require(lf.views_u() == mcfg.views_u && lf.views_v() == mcfg.views_v && lf.height() == mcfg.height &&
              lf.width() == mcfg.width,
          "light field does not match the model configuration");
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult out{init_model(mcfg, tcfg.seed), {}};
  detail::LoopSpec spec;
  spec.epochs = tcfg.max_epochs;
  spec.max_iterations = tcfg.max_iterations;
  detail::run_loop(out.model, lf, tcfg, spec, 0x51A7ull, tcfg.lr_init, out.report);
  out.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Continues joint optimization with Gumbel-annealed latent rounding. Uses
/// the learning rate the report ended with and appends to it.
inline SanrModel sga_finetune(SanrModel model, const LightField& lf, const TrainConfig& tcfg, TrainReport& report) {
  if (tcfg.sga_epochs == 0) return model;
  const auto t0 = std::chrono::steady_clock::now();
  detail::LoopSpec spec;
  spec.mode = LatentMode::kSga;
  spec.epochs = tcfg.sga_epochs;
  spec.max_iterations = tcfg.max_sga_iterations;
  spec.plateau = false;
  spec.sga = true;
  const double lr = report.final_lr > 0.0 ? report.final_lr : tcfg.lr_init;
  detail::run_loop(model, lf, tcfg, spec, 0x56A5ull, lr, report);
  for (auto& l : model.latents)
    for (auto& v : l.storage()) v = static_cast<float>(round_half_away(v));
  report.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return model;
}

/// Seed of the fixed input codes used by the base-model variant.
inline std::uint64_t base_noise_seed(std::uint64_t seed) { return seed ^ 0xB45E5EEDull; }

/// Base-model variant: the same network driven by fixed pseudo-random input
/// codes, trained for distortion only without weight quantization. Weights
/// are quantized afterwards on a symmetric 8-bit grid.
inline TrainResult train_base(const LightField& lf, const ModelConfig& mcfg, const TrainConfig& tcfg) {
  lf.validate();
  tcfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult out{init_model(mcfg, tcfg.seed), {}};
  out.model.latents = noise_latents(mcfg, base_noise_seed(tcfg.seed));
  TrainConfig cfg = tcfg;
  cfg.lambda = 0.0;
  detail::LoopSpec spec;
  spec.mode = LatentMode::kFixed;
  spec.quantize_weights = false;
  spec.epochs = tcfg.max_epochs;
  spec.max_iterations = tcfg.max_iterations;
  spec.noise_seed = base_noise_seed(tcfg.seed);
  spec.grid = WeightGrid::kSymmetric8Bit;
  detail::run_loop(out.model, lf, cfg, spec, 0xBA5Eull, tcfg.lr_init, out.report);
  out.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace sanr
