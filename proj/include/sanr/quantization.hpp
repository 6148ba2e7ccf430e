#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "sanr/common.hpp"
#include "sanr/rng.hpp"
#include "sanr/tensor.hpp"

namespace sanr {

/// Integer-grid tensor: value = ints * scale. Carries the Laplace statistics
/// used to entropy code the integers.
struct QuantizedTensor {
  std::vector<int> shape;
  std::vector<std::int32_t> ints;
  float scale = 1.0f;
  float laplace_mu = 0.0f;
  float laplace_b = 1.0f;

  Tensor dequantize() const {
    Tensor out(shape);
    for (std::size_t i = 0; i < ints.size(); ++i) out[i] = static_cast<float>(ints[i]) * scale;
    return out;
  }

  std::vector<double> int_values() const { return {ints.begin(), ints.end()}; }

  std::int32_t min_int() const { return ints.empty() ? 0 : *std::min_element(ints.begin(), ints.end()); }
  std::int32_t max_int() const { return ints.empty() ? 0 : *std::max_element(ints.begin(), ints.end()); }

  bool operator==(const QuantizedTensor&) const = default;
};

inline std::int32_t quantize_to_int(double x, double scale) {
  const double q = round_half_away(x / scale);
  require(std::abs(q) <= std::numeric_limits<std::int32_t>::max(), "quantized value out of int32 range");
  return static_cast<std::int32_t>(q);
}

/// Straight-through rounding onto the grid `scale * Z`. The backward pass is
/// the identity (see ste_round_backward).
inline Tensor ste_round(const Tensor& x, float scale) {
  require(scale > 0.0f, "ste_round: scale must be positive");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>(quantize_to_int(x[i], scale)) * scale;
  }
  return out;
}

inline const Tensor& ste_round_backward(const Tensor& grad_out) { return grad_out; }

inline QuantizedTensor quantize_tensor(const Tensor& x, float scale) {
  require(scale > 0.0f, "quantize_tensor: scale must be positive");
  QuantizedTensor q;
  q.shape = x.shape();
  q.scale = scale;
  q.ints.reserve(x.size());
  for (float v : x.values()) q.ints.push_back(quantize_to_int(v, scale));
  return q;
}

/// y + n with n ~ U(-0.5, 0.5). The gradient with respect to y is the identity.
template <typename T>
BasicTensor<T> add_uniform_noise(const BasicTensor<T>& y, Rng& rng) {
  BasicTensor<T> out(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    out[i] = static_cast<T>(y[i] + (rng.uniform_open() - 0.5));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stochastic Gumbel Annealing

/// Exponential temperature schedule from tau_start to tau_end over total_steps.
struct SgaSchedule {
  double tau_start = 0.5;
  double tau_end = 0.02;
  long total_steps = 1;

  /// Temperature at step t in [0, total_steps]; returns tau_end exactly at the end.
  double temperature(long t) const {
    if (t >= total_steps) return tau_end;
    const double frac = static_cast<double>(t) / static_cast<double>(total_steps);
    return tau_start * std::pow(tau_end / tau_start, frac);
  }
};

struct SgaState {
  SgaSchedule schedule;
  std::uint64_t rng_seed = 0;
  double temperature = 0.5;
};

inline constexpr double kSgaClampEps = 1e-4;

/// One relaxed rounding draw. `hard` lies on the integer grid and is the
/// forward value; `soft` is the Gumbel-softmax mixture and `grad` holds
/// d soft / d y, used in the backward pass.
template <typename T>
struct SgaSample {
  BasicTensor<T> hard;
  BasicTensor<T> soft;
  BasicTensor<T> grad;
};

template <typename T>
SgaSample<T> sga_sample(const BasicTensor<T>& y, double temperature, Rng& rng) {
  require(temperature > 0.0, "sga_sample: temperature must be positive");
  SgaSample<T> s{BasicTensor<T>(y.shape()), BasicTensor<T>(y.shape()), BasicTensor<T>(y.shape())};
  const double tau = temperature;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = y[i];
    const double lo = std::floor(v), hi = std::ceil(v);
    // Both Gumbel draws are consumed even on exact integers to keep the stream aligned.
    const double g_lo = rng.gumbel(), g_hi = rng.gumbel();
    if (lo == hi) {
      s.hard[i] = s.soft[i] = static_cast<T>(v);
      s.grad[i] = T(1);
      continue;
    }
    const double d_lo = std::clamp(v - lo, kSgaClampEps, 1.0 - kSgaClampEps);
    const double d_hi = std::clamp(hi - v, kSgaClampEps, 1.0 - kSgaClampEps);
    const double logit_lo = -std::atanh(d_lo) / tau, logit_hi = -std::atanh(d_hi) / tau;
    const double a_lo = logit_lo + g_lo, a_hi = logit_hi + g_hi;
    // Gumbel-softmax weight of the upper candidate.
    const double p_hi = 1.0 / (1.0 + std::exp(-(a_hi - a_lo) / tau));
    s.hard[i] = static_cast<T>(a_hi > a_lo ? hi : lo);
    s.soft[i] = static_cast<T>(lo + p_hi);
    const bool lo_free = (v - lo) > kSgaClampEps && (v - lo) < 1.0 - kSgaClampEps;
    const bool hi_free = (hi - v) > kSgaClampEps && (hi - v) < 1.0 - kSgaClampEps;
    const double dlogit_lo = lo_free ? -1.0 / (tau * (1.0 - d_lo * d_lo)) : 0.0;
    const double dlogit_hi = hi_free ? 1.0 / (tau * (1.0 - d_hi * d_hi)) : 0.0;
    s.grad[i] = static_cast<T>(p_hi * (1.0 - p_hi) / tau * (dlogit_hi - dlogit_lo));
  }
  return s;
}

// ---------------------------------------------------------------------------
// 16-bit post-training quantization

struct Uniform16 {
  std::vector<int> shape;
  std::vector<std::uint16_t> q;
  float min = 0.0f;
  float max = 0.0f;

  Tensor dequantize() const {
    Tensor out(shape);
    const double range = static_cast<double>(max) - static_cast<double>(min);
    for (std::size_t i = 0; i < q.size(); ++i) {
      out[i] = static_cast<float>(static_cast<double>(min) + q[i] / 65535.0 * range);
    }
    return out;
  }

  bool operator==(const Uniform16&) const = default;
};

/// q = round((x - min) / (max - min) * 65535); all zeros for a constant tensor.
/// min/max are rounded to f32 first so that encoder and decoder share them.
inline Uniform16 ptq_uniform16(const Tensor& x) {
  require(!x.empty(), "ptq_uniform16: empty tensor");
  for (float v : x.values()) require(std::isfinite(v), "ptq_uniform16: non-finite input");
  Uniform16 out;
  out.shape = x.shape();
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  out.min = *lo;
  out.max = *hi;
  out.q.assign(x.size(), 0);
  const double range = static_cast<double>(out.max) - static_cast<double>(out.min);
  if (range > 0.0) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double t = (static_cast<double>(x[i]) - out.min) / range * 65535.0;
      out.q[i] = static_cast<std::uint16_t>(std::clamp(std::lround(t), 0L, 65535L));
    }
  }
  return out;
}

}  // namespace sanr
