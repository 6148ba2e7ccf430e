#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "sanr/layers.hpp"
#include "sanr/rng.hpp"
#include "sanr/tensor.hpp"

namespace sanr {

/// Smallest probability mass charged for one symbol; equals the coder's
/// minimum table mass (1 / 65536).
inline constexpr double kMinSymbolProbability = 0x1.0p-16;
/// Lower bound on a predicted Laplace scale.
inline constexpr double kMinPredictedScale = 1e-3;
/// Lower bound on a fitted Laplace scale.
inline constexpr double kMinFittedScale = 1e-6;

/// Laplace location/scale. Reports quote sigma = b * sqrt(2).
struct LaplaceParams {
  double mu = 0.0;
  double b = 1.0;

  double sigma() const { return b * std::numbers::sqrt2; }
};

struct RateEstimate {
  double bits = 0.0;
  std::vector<double> per_element;
};

/// Laplace CDF.
inline double laplace_cdf(double t, double mu, double b) {
  const double z = (t - mu) / b;
  return z < 0 ? 0.5 * std::exp(z) : 1.0 - 0.5 * std::exp(-z);
}

/// Mass of [x - 0.5, x + 0.5], evaluated without cancellation in the tails.
inline double laplace_mass(double x, double mu, double b) {
  const double lo = x - 0.5 - mu, hi = x + 0.5 - mu;
  if (lo >= 0) return 0.5 * std::exp(-lo / b) * -std::expm1(-1.0 / b);
  if (hi <= 0) return 0.5 * std::exp(hi / b) * -std::expm1(-1.0 / b);
  return 1.0 - 0.5 * std::exp(-hi / b) - 0.5 * std::exp(lo / b);
}

/// Bit cost of one symbol together with its partial derivatives.
struct SymbolCost {
  double bits = 0.0;
  double d_x = 0.0;
  double d_mu = 0.0;
  double d_b = 0.0;
};

inline SymbolCost laplace_symbol_cost(double x, double mu, double b) {
  SymbolCost cost;
  const double p = laplace_mass(x, mu, b);
  if (!(p > kMinSymbolProbability)) {
    cost.bits = 16.0;
    return cost;
  }
  cost.bits = -std::log2(p);
  const double lo = x - 0.5 - mu, hi = x + 0.5 - mu;
  const double f_lo = std::exp(-std::abs(lo) / b) / (2.0 * b);
  const double f_hi = std::exp(-std::abs(hi) / b) / (2.0 * b);
  const double dp_dx = f_hi - f_lo;
  const double dp_db = -(hi * f_hi - lo * f_lo) / b;
  const double k = -1.0 / (p * std::numbers::ln2);
  cost.d_x = k * dp_dx;
  cost.d_mu = -cost.d_x;
  cost.d_b = k * dp_db;
  return cost;
}

/// Bits of integer-grid values under one Laplace model.
inline RateEstimate laplace_rate(std::span<const double> values, const LaplaceParams& params,
                                 bool keep_per_element = false) {
  RateEstimate r;
  if (keep_per_element) r.per_element.reserve(values.size());
  for (double x : values) {
    const double bits = laplace_symbol_cost(x, params.mu, params.b).bits;
    r.bits += bits;
    if (keep_per_element) r.per_element.push_back(bits);
  }
  return r;
}

/// Maximum-likelihood Laplace fit: median location, mean absolute deviation scale.
inline LaplaceParams fit_laplace(std::span<const double> x) {
  require(!x.empty(), "fit_laplace needs at least one element");
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double mu = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  double dev = 0.0;
  for (double v : sorted) dev += std::abs(v - mu);
  return {mu, std::max(dev / static_cast<double>(n), kMinFittedScale)};
}

// ---------------------------------------------------------------------------
// Channel-wise context model

/// Three 3x3 convolutions (1 -> C_ctx -> C_ctx -> 2) with ReLU in between.
/// Output channel 0 is the Laplace location, channel 1 the Laplace scale.
struct ContextModelParams {
  Tensor w1, b1, w2, b2, w3, b3;

  static ContextModelParams zeros(int hidden) {
    return {Tensor({hidden, 1, 3, 3}), Tensor({hidden}), Tensor({hidden, hidden, 3, 3}),
            Tensor({hidden}), Tensor({2, hidden, 3, 3}), Tensor({2})};
  }

  int hidden() const { return w1.dim(0); }

  template <typename F>
  void for_each(F&& f) {
    f(w1), f(b1), f(w2), f(b2), f(w3), f(b3);
  }
  template <typename F>
  void for_each(F&& f) const {
    f(w1), f(b1), f(w2), f(b2), f(w3), f(b3);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const Tensor& t) { n += t.size(); });
    return n;
  }
};

struct ContextPrediction {
  TensorD mu;     // h x w
  TensorD scale;  // h x w, >= kMinPredictedScale
};

/// Activations retained for the backward pass of one prediction.
struct ContextCache {
  TensorD input, hidden1, hidden2, raw;
};

namespace detail {

inline std::vector<double> widen(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace detail

inline ContextPrediction context_predict(const TensorD& prev, const ContextModelParams& ctx,
                                         ContextCache* cache = nullptr) {
  require(prev.rank() == 2, "context_predict expects an h x w map");
  require(ctx.w1.rank() == 4 && ctx.w1.dim(1) == 1 && ctx.w3.dim(0) == 2,
          "context model shape mismatch");
  const int h = prev.dim(0), w = prev.dim(1), c = ctx.hidden();
  using layers::ConvShape;
  const auto w1 = detail::widen(ctx.w1), b1 = detail::widen(ctx.b1), w2 = detail::widen(ctx.w2),
             b2 = detail::widen(ctx.b2), w3 = detail::widen(ctx.w3), b3 = detail::widen(ctx.b3);

  TensorD h1({c, h, w}), h2({c, h, w}), raw({2, h, w});
  layers::conv2d_forward(prev.data(), w1.data(), b1.data(), ConvShape{1, c, h, w, 3}, h1.data());
  for (auto& v : h1.storage()) v = std::max(v, 0.0);
  layers::conv2d_forward(h1.data(), w2.data(), b2.data(), ConvShape{c, c, h, w, 3}, h2.data());
  for (auto& v : h2.storage()) v = std::max(v, 0.0);
  layers::conv2d_forward(h2.data(), w3.data(), b3.data(), ConvShape{c, 2, h, w, 3}, raw.data());

  ContextPrediction out{TensorD({h, w}), TensorD({h, w})};
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < plane; ++i) {
    out.mu[i] = raw[i];
    out.scale[i] = std::max(raw[plane + i], kMinPredictedScale);
  }
  if (cache) *cache = {prev, std::move(h1), std::move(h2), std::move(raw)};
  return out;
}

/// Gradients of a context model in double precision, same layout as the params.
struct ContextGradients {
  std::vector<double> w1, b1, w2, b2, w3, b3;

  explicit ContextGradients(const ContextModelParams& p = ContextModelParams{})
      : w1(p.w1.size()), b1(p.b1.size()), w2(p.w2.size()), b2(p.b2.size()), w3(p.w3.size()),
        b3(p.b3.size()) {}

  void add_to(ContextModelParams& grads) const {
    auto add = [](Tensor& t, const std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) t[i] += static_cast<float>(g[i]);
    };
    add(grads.w1, w1), add(grads.b1, b1), add(grads.w2, w2), add(grads.b2, b2), add(grads.w3, w3),
        add(grads.b3, b3);
  }
};

/// Backpropagates d(loss)/d(mu) and d(loss)/d(scale) through one prediction.
/// Accumulates into `dprev` (h x w) and `grads`.
inline void context_backward(const ContextCache& cache, const ContextModelParams& ctx, const TensorD& dmu,
                             const TensorD& dscale, TensorD& dprev, ContextGradients& grads) {
  const int h = cache.input.dim(0), w = cache.input.dim(1), c = ctx.hidden();
  using layers::ConvShape;
  const auto w1 = detail::widen(ctx.w1), w2 = detail::widen(ctx.w2), w3 = detail::widen(ctx.w3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  TensorD draw({2, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    draw[i] = dmu[i];
    draw[plane + i] = cache.raw[plane + i] > kMinPredictedScale ? dscale[i] : 0.0;
  }
  TensorD dh2({c, h, w}), dh1({c, h, w});
  layers::conv2d_backward(cache.hidden2.data(), w3.data(), draw.data(), ConvShape{c, 2, h, w, 3}, dh2.data(),
                          grads.w3.data(), grads.b3.data());
  for (std::size_t i = 0; i < dh2.size(); ++i) {
    if (cache.hidden2[i] <= 0.0) dh2[i] = 0.0;
  }
  layers::conv2d_backward(cache.hidden1.data(), w2.data(), dh2.data(), ConvShape{c, c, h, w, 3}, dh1.data(),
                          grads.w2.data(), grads.b2.data());
  for (std::size_t i = 0; i < dh1.size(); ++i) {
    if (cache.hidden1[i] <= 0.0) dh1[i] = 0.0;
  }
  layers::conv2d_backward(cache.input.data(), w1.data(), dh1.data(), ConvShape{1, c, h, w, 3}, dprev.data(),
                          grads.w1.data(), grads.b1.data());
}

struct LatentRate {
  double bits = 0.0;
  std::vector<double> channel_bits;
  std::vector<double> per_element;  // filled when requested
  TensorD grad;                     // d bits / d latents, filled when requested
  std::optional<ContextGradients> context_grad;
};

/// Rate of one latent level (C x h x w) under the channel-wise autoregressive
/// model: channel 0 uses `first_channel`, channel c > 0 uses the context model
/// applied to channel c - 1 of the same tensor.
inline LatentRate latent_rate(const TensorD& latents, const ContextModelParams& ctx,
                              const LaplaceParams& first_channel, bool with_grad = false,
                              bool keep_per_element = false) {
  require(latents.rank() == 3, "latent_rate expects C x h x w");
  const int channels = latents.dim(0), h = latents.dim(1), w = latents.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  LatentRate out;
  out.channel_bits.assign(static_cast<std::size_t>(channels), 0.0);
  if (keep_per_element) out.per_element.reserve(latents.size());
  if (with_grad) {
    out.grad = TensorD(latents.shape());
    out.context_grad.emplace(ctx);
  }
  TensorD dmu({h, w}), dscale({h, w}), dprev({h, w});
  for (int c = 0; c < channels; ++c) {
    const double* y = latents.data() + c * plane;
    std::optional<ContextPrediction> pred;
    ContextCache cache;
    if (c > 0) {
      TensorD prev({h, w}, std::vector<double>(latents.data() + (c - 1) * plane, latents.data() + c * plane));
      pred = context_predict(prev, ctx, with_grad ? &cache : nullptr);
    }
    double bits = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double mu = pred ? pred->mu[i] : first_channel.mu;
      const double b = pred ? pred->scale[i] : first_channel.b;
      const SymbolCost cost = laplace_symbol_cost(y[i], mu, b);
      bits += cost.bits;
      if (keep_per_element) out.per_element.push_back(cost.bits);
      if (with_grad) {
        out.grad[c * plane + i] += cost.d_x;
        dmu[i] = cost.d_mu;
        dscale[i] = cost.d_b;
      }
    }
    out.channel_bits[static_cast<std::size_t>(c)] = bits;
    out.bits += bits;
    if (with_grad && pred) {
      dprev.fill(0.0);
      context_backward(cache, ctx, dmu, dscale, dprev, *out.context_grad);
      for (std::size_t i = 0; i < plane; ++i) out.grad[(c - 1) * plane + i] += dprev[i];
    }
  }
  return out;
}

/// Fan-in scaled uniform initialization; the scale output starts near 1.
inline ContextModelParams init_context_model(int hidden, Rng& rng) {
  auto ctx = ContextModelParams::zeros(hidden);
  auto init = [&](Tensor& t, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.storage()) v = static_cast<float>(rng.uniform(-bound, bound));
  };
  init(ctx.w1, 9), init(ctx.b1, 9);
  init(ctx.w2, 9 * hidden), init(ctx.b2, 9 * hidden);
  init(ctx.w3, 9 * hidden), init(ctx.b3, 9 * hidden);
  ctx.b3[1] = 1.0f;
  return ctx;
}

}  // namespace sanr
