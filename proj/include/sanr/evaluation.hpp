#pragma once

#include <Eigen/Dense>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sanr/lightfield_io.hpp"
#include "sanr/model.hpp"
#include "sanr/plot.hpp"

namespace sanr {

inline constexpr double kPsnrCap = 100.0;

/// Mean squared error of two 8-bit images over all pixels and channels.
inline double image_mse(const Image& a, const Image& b) {
  require(a.height == b.height && a.width == b.width, "dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = static_cast<double>(a.rgb[i]) - b.rgb[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.rgb.size());
}

inline double psnr_from_mse(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

struct PsnrResult {
  int views_u = 0, views_v = 0;
  std::vector<double> per_view;  // U x V, row-major
  double mean = 0.0;

  double at(int u, int v) const { return per_view[static_cast<std::size_t>(u) * views_v + v]; }
};

inline void require_same_dims(const LightField& a, const LightField& b) {
  require(a.views_u() == b.views_u() && a.views_v() == b.views_v() && a.height() == b.height() &&
              a.width() == b.width(),
          "dimension mismatch");
}

inline PsnrResult psnr(const LightField& ref, const LightField& recon) {
  require_same_dims(ref, recon);
  PsnrResult r{ref.views_u(), ref.views_v(), {}, 0.0};
  for (std::size_t i = 0; i < ref.views().size(); ++i) {
    r.per_view.push_back(psnr_from_mse(image_mse(ref.views()[i], recon.views()[i])));
    r.mean += r.per_view.back();
  }
  r.mean /= static_cast<double>(r.per_view.size());
  return r;
}

/// Same numbers as psnr(); kept as the name the reports use.
inline PsnrResult per_view_psnr_map(const LightField& ref, const LightField& recon) { return psnr(ref, recon); }

inline double bpp(std::size_t stream_bytes, int views_u, int views_v, int height, int width) {
  require(views_u > 0 && views_v > 0 && height > 0 && width > 0, "dimensions must be positive");
  return static_cast<double>(stream_bytes) * 8.0 /
         (static_cast<double>(views_u) * views_v * static_cast<double>(height) * width);
}

/// Per-pixel mean of |ref - recon| over views and channels, H x W row-major.
struct ErrorMap {
  int height = 0, width = 0;
  std::vector<double> values;
};

inline ErrorMap avg_error_map(const LightField& ref, const LightField& recon) {
  require_same_dims(ref, recon);
  ErrorMap m{ref.height(), ref.width(), std::vector<double>(static_cast<std::size_t>(ref.height()) * ref.width())};
  const double norm = 3.0 * ref.view_count();
  for (std::size_t v = 0; v < ref.views().size(); ++v) {
    const auto& a = ref.views()[v].rgb;
    const auto& b = recon.views()[v].rgb;
    for (std::size_t p = 0; p < m.values.size(); ++p) {
      double s = 0.0;
      for (int c = 0; c < 3; ++c) s += std::abs(static_cast<double>(a[p * 3 + c]) - b[p * 3 + c]);
      m.values[p] += s / norm;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Bjontegaard deltas

struct RDPoint {
  double bpp = 0.0;
  double psnr = 0.0;
};

struct RDCurve {
  std::string label;
  std::vector<RDPoint> points;

  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      require(points[i].bpp > 0.0, "curve '" + label + "': bpp must be positive");
      require(i == 0 || points[i].bpp > points[i - 1].bpp, "curve '" + label + "': bpp must strictly increase");
    }
  }
};

struct BdResult {
  double bd_rate_percent = 0.0;
  double bd_psnr_db = 0.0;
};

namespace detail {

/// Least-squares cubic y = c0 + c1 x + c2 x^2 + c3 x^3.
inline Eigen::Vector4d fit_cubic(const std::vector<double>& x, const std::vector<double>& y) {
  Eigen::MatrixXd a(static_cast<long>(x.size()), 4);
  Eigen::VectorXd b(static_cast<long>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (int k = 0; k < 4; ++k) a(static_cast<long>(i), k) = std::pow(x[i], k);
    b(static_cast<long>(i)) = y[i];
  }
  return a.colPivHouseholderQr().solve(b);
}

inline double integrate_cubic(const Eigen::Vector4d& c, double lo, double hi) {
  auto prim = [&](double x) { return c[0] * x + c[1] * x * x / 2 + c[2] * x * x * x / 3 + c[3] * x * x * x * x / 4; };
  return prim(hi) - prim(lo);
}

/// Mean difference (test - anchor) of y over the shared x interval.
inline double mean_gap(const std::vector<double>& xa, const std::vector<double>& ya, const std::vector<double>& xt,
                       const std::vector<double>& yt, const char* what) {
  const double lo = std::max(*std::min_element(xa.begin(), xa.end()), *std::min_element(xt.begin(), xt.end()));
  const double hi = std::min(*std::max_element(xa.begin(), xa.end()), *std::max_element(xt.begin(), xt.end()));
  require(hi > lo, std::string("curves do not overlap in ") + what);
  const auto ca = fit_cubic(xa, ya), ct = fit_cubic(xt, yt);
  return (integrate_cubic(ct, lo, hi) - integrate_cubic(ca, lo, hi)) / (hi - lo);
}

}  // namespace detail

inline BdResult bd_metrics(const RDCurve& anchor, const RDCurve& test) {
  require(anchor.points.size() >= 4 && test.points.size() >= 4, "BD metrics need at least 4 points per curve");
  anchor.validate();
  test.validate();
  std::vector<double> ra, pa, rt, pt;
  for (const auto& p : anchor.points) ra.push_back(std::log10(p.bpp)), pa.push_back(p.psnr);
  for (const auto& p : test.points) rt.push_back(std::log10(p.bpp)), pt.push_back(p.psnr);
  BdResult r;
  r.bd_psnr_db = detail::mean_gap(ra, pa, rt, pt, "rate");
  r.bd_rate_percent = (std::pow(10.0, detail::mean_gap(pa, ra, pt, rt, "PSNR")) - 1.0) * 100.0;
  return r;
}

// ---------------------------------------------------------------------------
// Decoding complexity

inline double conv_macs(int in_channels, int out_channels, int kernel, long pixels) {
  return static_cast<double>(in_channels) * out_channels * kernel * kernel * static_cast<double>(pixels);
}

/// Multiply-accumulates of one full-field decode, split by stage.
struct MacBreakdown {
  double block_conv = 0;          // modulated convolutions, all views
  double kernel_composition = 0;  // W (x) B per view and block
  double normalization = 0;       // folded per-channel affine
  double head = 0;
  double context = 0;             // context models, once per field
  double pixels = 0;              // U * V * H * W

  double total() const { return block_conv + kernel_composition + normalization + head + context; }
  double kmac_per_pixel() const { return total() / pixels / 1000.0; }
  /// Everything that scales with the spatial size.
  double convolutional_kmac_per_pixel() const { return (block_conv + normalization + head + context) / pixels / 1000.0; }
};

inline MacBreakdown decode_macs(const ModelConfig& cfg) {
  cfg.validate();
  MacBreakdown m;
  const double views = static_cast<double>(cfg.views_u) * cfg.views_v;
  const int cout = cfg.out_channels(), k = cfg.kernel_size;
  for (int i = 0; i < kNumBlocks; ++i) {
    const auto [h, w] = latent_shape(i + 1, cfg.height, cfg.width);
    const auto [oh, ow] = block_output_shape(cfg, i);
    const int cin = cfg.in_channels(i);
    m.block_conv += views * conv_macs(cin, cout, k, static_cast<long>(h) * w);
    m.kernel_composition += views * static_cast<double>(cout) * cin * cfg.rank * k * k;
    m.normalization += views * static_cast<double>(cout) * oh * ow;
    if (cfg.latent_channels > 1) {
      const int c = cfg.context_channels;
      const long px = static_cast<long>(h) * w;
      m.context += (cfg.latent_channels - 1) * (conv_macs(1, c, 3, px) + conv_macs(c, c, 3, px) + conv_macs(c, 2, 3, px));
    }
  }
  m.head = views * conv_macs(cout, 3, cfg.head_kernel_size, static_cast<long>(cfg.height) * cfg.width);
  m.pixels = views * cfg.height * static_cast<double>(cfg.width);
  return m;
}

inline double kmac_per_pixel(const ModelConfig& cfg) { return decode_macs(cfg).kmac_per_pixel(); }

// ---------------------------------------------------------------------------
// Report emission

struct ReportMaps {
  std::optional<ErrorMap> error_map;
  std::optional<PsnrResult> per_view_psnr;
};

namespace detail {

/// Flat little-endian float32 matrix plus a JSON sidecar describing it.
inline void write_matrix(const fs::path& stem, int rows, int cols, const std::vector<double>& values) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(values.size() * 4);
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  std::ofstream f(fs::path(stem).concat(".f32"), std::ios::binary);
  require(static_cast<bool>(f), "cannot write " + stem.string() + ".f32");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  std::ofstream meta(fs::path(stem).concat(".json"));
  meta << nlohmann::json{{"shape", {rows, cols}}, {"dtype", "float32"}, {"byte_order", "little"}, {"order", "row-major"}}.dump(2)
       << "\n";
  require(static_cast<bool>(f) && static_cast<bool>(meta), "cannot write " + stem.string());
}

inline std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline Image rd_plot(const std::vector<RDCurve>& curves) {
  constexpr int kW = 640, kH = 480, kLeft = 60, kRight = 20, kTop = 20, kBottom = 50;
  plot::Canvas c(kW, kH);
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& cv : curves) {
    for (const auto& p : cv.points) {
      x0 = std::min(x0, p.bpp), x1 = std::max(x1, p.bpp), y0 = std::min(y0, p.psnr), y1 = std::max(y1, p.psnr);
    }
  }
  if (x1 <= x0) x0 -= 0.5 * std::max(std::abs(x0), 1e-3), x1 += 0.5 * std::max(std::abs(x1), 1e-3);
  if (y1 <= y0) y0 -= 1.0, y1 += 1.0;
  auto px = [&](double x) { return kLeft + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (kW - kLeft - kRight))); };
  auto py = [&](double y) { return kH - kBottom - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (kH - kTop - kBottom))); };
  for (int t = 0; t <= 4; ++t) {
    const double fx = x0 + (x1 - x0) * t / 4, fy = y0 + (y1 - y0) * t / 4;
    c.line(px(fx), kTop, px(fx), kH - kBottom, plot::kGrey);
    c.line(kLeft, py(fy), kW - kRight, py(fy), plot::kGrey);
    const std::string xs = plot::fixed(fx, 3), ys = plot::fixed(fy, 1);
    c.text(px(fx) - plot::Canvas::text_width(xs, 2) / 2, kH - kBottom + 8, xs, plot::kBlack, 2);
    c.text(kLeft - 6 - plot::Canvas::text_width(ys, 2), py(fy) - 5, ys, plot::kBlack, 2);
  }
  c.line(kLeft, kH - kBottom, kW - kRight, kH - kBottom, plot::kBlack);
  c.line(kLeft, kTop, kLeft, kH - kBottom, plot::kBlack);
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto color = plot::palette(static_cast<int>(i));
    const auto& pts = curves[i].points;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      c.marker(px(pts[j].bpp), py(pts[j].psnr), color);
      if (j) c.line(px(pts[j - 1].bpp), py(pts[j - 1].psnr), px(pts[j].bpp), py(pts[j].psnr), color);
    }
    c.fill_rect(kW - kRight - 30, kTop + 10 + 12 * static_cast<int>(i), kW - kRight - 10,
                kTop + 16 + 12 * static_cast<int>(i), color);
  }
  return c.image();
}

inline Image error_map_image(const ErrorMap& m) {
  plot::Canvas c(m.width, m.height);
  const double peak = std::max(1e-12, *std::max_element(m.values.begin(), m.values.end()));
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) c.set(x, y, plot::heat(m.values[static_cast<std::size_t>(y) * m.width + x] / peak));
  return c.image();
}

inline Image psnr_grid_image(const PsnrResult& r) {
  constexpr int kCell = 48;
  plot::Canvas c(r.views_v * kCell, r.views_u * kCell);
  double lo = 1e300, hi = -1e300;
  for (double v : r.per_view) lo = std::min(lo, v), hi = std::max(hi, v);
  for (int u = 0; u < r.views_u; ++u) {
    for (int v = 0; v < r.views_v; ++v) {
      const double val = r.at(u, v);
      const double t = hi > lo ? (val - lo) / (hi - lo) : 1.0;
      c.fill_rect(v * kCell, u * kCell, (v + 1) * kCell, (u + 1) * kCell, plot::heat(0.25 + 0.75 * t));
      const std::string s = plot::fixed(val, 1);
      c.text(v * kCell + (kCell - plot::Canvas::text_width(s, 2)) / 2, u * kCell + kCell / 2 - 5, s,
             t > 0.6 ? plot::kBlack : plot::kWhite, 2);
    }
  }
  return c.image();
}

}  // namespace detail

/// Writes rd.csv (label,bpp,psnr_db), rd.png and, when given, the error map
/// and per-view PSNR grid as PNG plus float32 matrices.
inline void emit_reports(const std::vector<RDCurve>& curves, const ReportMaps& maps, const fs::path& out_dir) {
  require(!curves.empty(), "no curves to report");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(fs::is_directory(out_dir), "cannot create output directory " + out_dir.string());
  std::ofstream csv(out_dir / "rd.csv");
  require(static_cast<bool>(csv), "cannot write " + (out_dir / "rd.csv").string());
  csv << "label,bpp,psnr_db\n";
  for (const auto& cv : curves) {
    for (const auto& p : cv.points) csv << cv.label << ',' << detail::csv_number(p.bpp) << ',' << detail::csv_number(p.psnr) << '\n';
  }
  csv.close();
  require(static_cast<bool>(csv), "write failed: rd.csv");
  write_png(out_dir / "rd.png", detail::rd_plot(curves));
  if (maps.error_map) {
    write_png(out_dir / "error_map.png", detail::error_map_image(*maps.error_map));
    detail::write_matrix(out_dir / "error_map", maps.error_map->height, maps.error_map->width, maps.error_map->values);
  }
  if (maps.per_view_psnr) {
    write_png(out_dir / "per_view_psnr.png", detail::psnr_grid_image(*maps.per_view_psnr));
    detail::write_matrix(out_dir / "per_view_psnr", maps.per_view_psnr->views_u, maps.per_view_psnr->views_v,
                         maps.per_view_psnr->per_view);
  }
}

}  // namespace sanr
