#pragma once

// Dense building blocks with hand-written backward passes. Feature maps are
// C x H x W row-major; a batch is N contiguous feature maps.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "sanr/tensor.hpp"

namespace sanr::layers {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvShape {
  int in_channels;
  int out_channels;
  int height;
  int width;
  int kernel;

  int pad() const { return kernel / 2; }
  int taps() const { return kernel * kernel; }
  long pixels() const { return static_cast<long>(height) * width; }
};

namespace detail {

// Rows of the output processed per im2col chunk; keeps the column buffer small
// for large frames. Depends only on the shape, so results are reproducible.
inline int chunk_rows(const ConvShape& s) {
  constexpr long kBudget = 1L << 22;
  const long per_row = static_cast<long>(s.in_channels) * s.taps() * s.width;
  return static_cast<int>(std::clamp<long>(kBudget / std::max(1L, per_row), 1L, s.height));
}

template <typename T>
void im2col(const T* in, const ConvShape& s, int y0, int y1, T* cols) {
  const int rows = y1 - y0;
  const long n = static_cast<long>(rows) * s.width;
  const int p = s.pad();
  for (int c = 0; c < s.in_channels; ++c) {
    const T* plane = in + static_cast<long>(c) * s.pixels();
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        T* dst = cols + ((static_cast<long>(c) * s.kernel + ky) * s.kernel + kx) * n;
        const int dx = kx - p;
        const int x_lo = std::max(0, -dx), x_hi = std::min(s.width, s.width - dx);
        for (int y = y0; y < y1; ++y) {
          T* row = dst + static_cast<long>(y - y0) * s.width;
          const int sy = y + ky - p;
          if (sy < 0 || sy >= s.height) {
            std::fill(row, row + s.width, T(0));
            continue;
          }
          const T* src = plane + static_cast<long>(sy) * s.width + dx;
          std::fill(row, row + x_lo, T(0));
          for (int x = x_lo; x < x_hi; ++x) row[x] = src[x];
          std::fill(row + x_hi, row + s.width, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvShape& s, int y0, int y1, T* din) {
  const int rows = y1 - y0;
  const long n = static_cast<long>(rows) * s.width;
  const int p = s.pad();
  for (int c = 0; c < s.in_channels; ++c) {
    T* plane = din + static_cast<long>(c) * s.pixels();
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const T* src = cols + ((static_cast<long>(c) * s.kernel + ky) * s.kernel + kx) * n;
        const int dx = kx - p;
        const int x_lo = std::max(0, -dx), x_hi = std::min(s.width, s.width - dx);
        for (int y = y0; y < y1; ++y) {
          const int sy = y + ky - p;
          if (sy < 0 || sy >= s.height) continue;
          const T* row = src + static_cast<long>(y - y0) * s.width;
          T* dst = plane + static_cast<long>(sy) * s.width + dx;
          for (int x = x_lo; x < x_hi; ++x) dst[x] += row[x];
        }
      }
    }
  }
}

}  // namespace detail

/// Same-padded stride-1 convolution of one feature map.
/// kernel: out x in x k x k, bias: out (may be empty), out: out x H x W.
template <typename T>
void conv2d_forward(const T* in, const T* kernel, const T* bias, const ConvShape& s, T* out) {
  const int step = detail::chunk_rows(s);
  const long kdim = static_cast<long>(s.in_channels) * s.taps();
  std::vector<T> cols;
  ConstMatrixMap<T> k(kernel, s.out_channels, kdim);
  RowMatrix<T> prod;
  for (int y0 = 0; y0 < s.height; y0 += step) {
    const int y1 = std::min(s.height, y0 + step);
    const long n = static_cast<long>(y1 - y0) * s.width;
    cols.resize(static_cast<std::size_t>(kdim * n));
    detail::im2col(in, s, y0, y1, cols.data());
    prod.noalias() = k * ConstMatrixMap<T>(cols.data(), kdim, n);
    for (int o = 0; o < s.out_channels; ++o) {
      T* dst = out + o * s.pixels() + static_cast<long>(y0) * s.width;
      const T b = bias ? bias[o] : T(0);
      for (long i = 0; i < n; ++i) dst[i] = prod(o, i) + b;
    }
  }
}

/// Accumulates gradients of a same-padded convolution. Any of din, dkernel,
/// dbias may be null.
template <typename T>
void conv2d_backward(const T* in, const T* kernel, const T* dout, const ConvShape& s, T* din, T* dkernel,
                     T* dbias) {
  const int step = detail::chunk_rows(s);
  const long kdim = static_cast<long>(s.in_channels) * s.taps();
  std::vector<T> cols;
  ConstMatrixMap<T> k(kernel, s.out_channels, kdim);
  RowMatrix<T> dout_chunk, dcols;
  if (dbias) {
    for (int o = 0; o < s.out_channels; ++o) {
      const T* g = dout + o * s.pixels();
      T acc = 0;
      for (long i = 0; i < s.pixels(); ++i) acc += g[i];
      dbias[o] += acc;
    }
  }
  if (!din && !dkernel) return;
  for (int y0 = 0; y0 < s.height; y0 += step) {
    const int y1 = std::min(s.height, y0 + step);
    const long n = static_cast<long>(y1 - y0) * s.width;
    dout_chunk.resize(s.out_channels, n);
    for (int o = 0; o < s.out_channels; ++o) {
      const T* g = dout + o * s.pixels() + static_cast<long>(y0) * s.width;
      for (long i = 0; i < n; ++i) dout_chunk(o, i) = g[i];
    }
    if (dkernel) {
      cols.resize(static_cast<std::size_t>(kdim * n));
      detail::im2col(in, s, y0, y1, cols.data());
      MatrixMap<T>(dkernel, s.out_channels, kdim).noalias() +=
          dout_chunk * ConstMatrixMap<T>(cols.data(), kdim, n).transpose();
    }
    if (din) {
      dcols.noalias() = k.transpose() * dout_chunk;
      detail::col2im_add(dcols.data(), s, y0, y1, din);
    }
  }
}

/// Nearest-neighbour resize of a C x h x w map to C x H x W.
template <typename T>
void upsample_nearest(const T* in, int channels, int h, int w, int out_h, int out_w, T* out) {
  for (int c = 0; c < channels; ++c) {
    const T* src = in + static_cast<long>(c) * h * w;
    T* dst = out + static_cast<long>(c) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const int sy = static_cast<int>(static_cast<long>(y) * h / out_h);
      for (int x = 0; x < out_w; ++x) {
        dst[static_cast<long>(y) * out_w + x] = src[static_cast<long>(sy) * w + static_cast<int>(static_cast<long>(x) * w / out_w)];
      }
    }
  }
}

template <typename T>
void upsample_nearest_backward(const T* dout, int channels, int h, int w, int out_h, int out_w, T* din) {
  for (int c = 0; c < channels; ++c) {
    const T* src = dout + static_cast<long>(c) * out_h * out_w;
    T* dst = din + static_cast<long>(c) * h * w;
    for (int y = 0; y < out_h; ++y) {
      const int sy = static_cast<int>(static_cast<long>(y) * h / out_h);
      for (int x = 0; x < out_w; ++x) {
        dst[static_cast<long>(sy) * w + static_cast<int>(static_cast<long>(x) * w / out_w)] +=
            src[static_cast<long>(y) * out_w + x];
      }
    }
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

/// Batch normalization over (N, H, W) for an N x C x P batch, training mode.
/// Keeps what the backward pass needs.
template <typename T>
struct BatchNormCache {
  std::vector<T> normalized;  // N x C x P
  std::vector<T> inv_std;     // C
  int batch = 0, channels = 0;
  long plane = 0;
};

template <typename T>
void batchnorm_forward(const T* x, int batch, int channels, long plane, const T* gamma, const T* beta, T eps,
                       T* y, BatchNormCache<T>& cache) {
  cache.batch = batch;
  cache.channels = channels;
  cache.plane = plane;
  cache.normalized.resize(static_cast<std::size_t>(batch) * channels * plane);
  cache.inv_std.resize(static_cast<std::size_t>(channels));
  const double m = static_cast<double>(batch) * plane;
  for (int c = 0; c < channels; ++c) {
    double sum = 0, sq = 0;
    for (int n = 0; n < batch; ++n) {
      const T* src = x + (static_cast<long>(n) * channels + c) * plane;
      for (long i = 0; i < plane; ++i) sum += src[i];
    }
    const double mean = sum / m;
    for (int n = 0; n < batch; ++n) {
      const T* src = x + (static_cast<long>(n) * channels + c) * plane;
      for (long i = 0; i < plane; ++i) sq += (src[i] - mean) * (src[i] - mean);
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(sq / m + eps));
    cache.inv_std[c] = inv;
    for (int n = 0; n < batch; ++n) {
      const long off = (static_cast<long>(n) * channels + c) * plane;
      for (long i = 0; i < plane; ++i) {
        const T xh = static_cast<T>(x[off + i] - mean) * inv;
        cache.normalized[off + i] = xh;
        y[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
}

template <typename T>
void batchnorm_backward(const T* dy, const T* gamma, const BatchNormCache<T>& cache, T* dx, T* dgamma,
                        T* dbeta) {
  const long plane = cache.plane;
  const double m = static_cast<double>(cache.batch) * plane;
  for (int c = 0; c < cache.channels; ++c) {
    double sum_dy = 0, sum_dy_xh = 0;
    for (int n = 0; n < cache.batch; ++n) {
      const long off = (static_cast<long>(n) * cache.channels + c) * plane;
      for (long i = 0; i < plane; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xh += static_cast<double>(dy[off + i]) * cache.normalized[off + i];
      }
    }
    dgamma[c] += static_cast<T>(sum_dy_xh);
    dbeta[c] += static_cast<T>(sum_dy);
    const T scale = gamma[c] * cache.inv_std[c];
    const T mean_dy = static_cast<T>(sum_dy / m), mean_dy_xh = static_cast<T>(sum_dy_xh / m);
    for (int n = 0; n < cache.batch; ++n) {
      const long off = (static_cast<long>(n) * cache.channels + c) * plane;
      for (long i = 0; i < plane; ++i) {
        dx[off + i] = scale * (dy[off + i] - mean_dy - cache.normalized[off + i] * mean_dy_xh);
      }
    }
  }
}

}  // namespace sanr::layers
