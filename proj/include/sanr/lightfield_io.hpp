#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "json.hpp"
#include "sanr/common.hpp"
#include "sanr/rng.hpp"

namespace sanr {

namespace fs = std::filesystem;

/// Discrete view index. `u` is the horizontal view index, `v` the vertical one.
struct AngularCoord {
  int u = 0;
  int v = 0;
  bool operator==(const AngularCoord&) const = default;
};

/// Interleaved 8-bit RGB image.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}

  std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

/// U x V grid of H x W sub-aperture images stored row-major (u outer, v inner).
class LightField {
 public:
  LightField() = default;
  LightField(int views_u, int views_v, int height, int width)
      : views_u_(views_u), views_v_(views_v), height_(height), width_(width),
        views_(static_cast<std::size_t>(views_u) * views_v, Image(height, width)) {}

  int views_u() const { return views_u_; }
  int views_v() const { return views_v_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int view_count() const { return views_u_ * views_v_; }

  std::size_t index(AngularCoord c) const {
    require(contains(c), "angular coordinate (" + std::to_string(c.u) + "," + std::to_string(c.v) +
                             ") out of range");
    return static_cast<std::size_t>(c.u) * views_v_ + c.v;
  }
  bool contains(AngularCoord c) const { return c.u >= 0 && c.u < views_u_ && c.v >= 0 && c.v < views_v_; }
  AngularCoord coord(std::size_t index) const {
    return {static_cast<int>(index / views_v_), static_cast<int>(index % views_v_)};
  }

  Image& view(AngularCoord c) { return views_[index(c)]; }
  const Image& view(AngularCoord c) const { return views_[index(c)]; }
  std::vector<Image>& views() { return views_; }
  const std::vector<Image>& views() const { return views_; }

  /// Checks the shared-dimension invariant.
  void validate() const {
    require(views_u_ > 0 && views_v_ > 0, "light field has no views");
    require(views_.size() == static_cast<std::size_t>(view_count()), "light field view count mismatch");
    for (const auto& img : views_) {
      require(img.height == height_ && img.width == width_, "inconsistent dimensions");
      require(img.rgb.size() == static_cast<std::size_t>(height_) * width_ * 3, "inconsistent dimensions");
    }
  }

  bool operator==(const LightField&) const = default;

 private:
  int views_u_ = 0;
  int views_v_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<Image> views_;
};

// ---------------------------------------------------------------------------
// PNG

inline Image read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw Error("unreadable image " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(image.height), static_cast<int>(image.width));
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error("unreadable image " + path.string() + ": " + msg);
  }
  return out;
}

inline void write_png_raw(const fs::path& path, int height, int width, bool gray,
                          const std::uint8_t* pixels) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, pixels, 0, nullptr)) {
    throw Error("cannot write image " + path.string() + ": " + image.message);
  }
}

inline void write_png(const fs::path& path, const Image& img) {
  write_png_raw(path, img.height, img.width, false, img.rgb.data());
}

// ---------------------------------------------------------------------------
// Directory layout

/// File naming for one view. The pattern accepts `{u}`, `{v}`, `{u:0Nd}` and
/// `{v:0Nd}` placeholders.
class NamingScheme {
 public:
  NamingScheme() = default;
  explicit NamingScheme(std::string pattern) : pattern_(std::move(pattern)) {}

  const std::string& pattern() const { return pattern_; }

  std::string filename(AngularCoord c) const {
    std::string out;
    std::size_t i = 0;
    while (i < pattern_.size()) {
      if (pattern_[i] == '{') {
        const auto close = pattern_.find('}', i);
        require(close != std::string::npos, "bad naming pattern " + pattern_);
        const std::string field = pattern_.substr(i + 1, close - i - 1);
        const int value = field[0] == 'u' ? c.u : c.v;
        int width = 0;
        if (field.size() > 1) width = std::stoi(field.substr(3, field.size() - 4));
        std::string digits = std::to_string(value);
        if (static_cast<int>(digits.size()) < width) digits.insert(0, width - digits.size(), '0');
        out += digits;
        i = close + 1;
      } else {
        out += pattern_[i++];
      }
    }
    return out;
  }

  std::optional<AngularCoord> parse(const std::string& name) const {
    std::string re;
    std::vector<char> order;
    std::size_t i = 0;
    while (i < pattern_.size()) {
      if (pattern_[i] == '{') {
        const auto close = pattern_.find('}', i);
        order.push_back(pattern_[i + 1]);
        re += "([0-9]+)";
        i = close + 1;
      } else {
        const char ch = pattern_[i++];
        if (std::string_view(".^$|()[]*+?\\{}").find(ch) != std::string_view::npos) re += '\\';
        re += ch;
      }
    }
    std::smatch m;
    if (!std::regex_match(name, m, std::regex(re))) return std::nullopt;
    AngularCoord c;
    for (std::size_t k = 0; k < order.size(); ++k) {
      (order[k] == 'u' ? c.u : c.v) = std::stoi(m[static_cast<int>(k + 1)].str());
    }
    return c;
  }

 private:
  std::string pattern_ = "view_{u:02d}_{v:02d}.png";
};

/// Loads a directory of per-view PNGs. The grid size comes from `meta.json`
/// when present, otherwise from the largest indices found.
inline LightField load_lightfield(const fs::path& dir, const NamingScheme& scheme = {}) {
  require(fs::is_directory(dir), "not a directory: " + dir.string());
  int views_u = 0, views_v = 0;
  const fs::path meta = dir / "meta.json";
  if (fs::exists(meta)) {
    std::ifstream in(meta);
    const auto j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), "malformed meta.json in " + dir.string());
    views_u = j.value("U", 0);
    views_v = j.value("V", 0);
  } else {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (auto c = scheme.parse(entry.path().filename().string())) {
        views_u = std::max(views_u, c->u + 1);
        views_v = std::max(views_v, c->v + 1);
      }
    }
  }
  require(views_u > 0 && views_v > 0, "no views found in " + dir.string());

  std::vector<Image> images;
  images.reserve(static_cast<std::size_t>(views_u) * views_v);
  for (int u = 0; u < views_u; ++u) {
    for (int v = 0; v < views_v; ++v) {
      const fs::path p = dir / scheme.filename({u, v});
      if (!fs::exists(p)) {
        throw Error("missing view (" + std::to_string(u) + "," + std::to_string(v) + ")");
      }
      images.push_back(read_png(p));
    }
  }
  const int h = images.front().height, w = images.front().width;
  for (const auto& img : images) {
    require(img.height == h && img.width == w, "inconsistent dimensions");
  }
  LightField lf(views_u, views_v, h, w);
  lf.views() = std::move(images);
  return lf;
}

inline void save_lightfield(const LightField& lf, const fs::path& dir, const std::string& dataset_name = "",
                            const NamingScheme& scheme = {}) {
  lf.validate();
  fs::create_directories(dir);
  for (std::size_t i = 0; i < lf.views().size(); ++i) {
    write_png(dir / scheme.filename(lf.coord(i)), lf.views()[i]);
  }
  nlohmann::json j{{"U", lf.views_u()},
                   {"V", lf.views_v()},
                   {"H", lf.height()},
                   {"W", lf.width()},
                   {"dataset_name", dataset_name},
                   {"color_space", "RGB"}};
  std::ofstream(dir / "meta.json") << j.dump(2) << "\n";
}

/// Central target_u x target_v angular window, each view cropped by removing
/// `crop_left` columns and `crop_top` rows.
inline LightField crop_and_center(const LightField& lf, int target_u, int target_v, int crop_left,
                                  int crop_top) {
  lf.validate();
  if (target_u < 1 || target_v < 1 || target_u > lf.views_u() || target_v > lf.views_v()) {
    throw Error("target exceeds available views");
  }
  require(crop_left >= 0 && crop_top >= 0 && crop_left < lf.width() && crop_top < lf.height(),
          "crop offsets exceed view size");
  const int u0 = (lf.views_u() - target_u) / 2;
  const int v0 = (lf.views_v() - target_v) / 2;
  const int h = lf.height() - crop_top, w = lf.width() - crop_left;
  LightField out(target_u, target_v, h, w);
  for (int u = 0; u < target_u; ++u) {
    for (int v = 0; v < target_v; ++v) {
      const Image& src = lf.view({u0 + u, v0 + v});
      Image& dst = out.view({u, v});
      for (int y = 0; y < h; ++y) {
        const auto* row = &src.rgb[(static_cast<std::size_t>(y + crop_top) * src.width + crop_left) * 3];
        std::copy(row, row + static_cast<std::size_t>(w) * 3, &dst.rgb[static_cast<std::size_t>(y) * w * 3]);
      }
    }
  }
  return out;
}

/// Deterministic textured scene seen from a U x V camera grid. View (u, v)
/// samples the base texture shifted by disparity * (u - u_c, v - v_c): `u`
/// moves along x, `v` along y.
inline LightField make_synthetic_lightfield(int h, int w, int u_count, int v_count, double disparity,
                                            std::uint64_t seed) {
  require(h >= 16 && w >= 16, "synthetic light field needs h, w >= 16");
  require(u_count >= 1 && v_count >= 1, "synthetic light field needs at least one view");
  require(std::abs(disparity) * std::max(u_count, v_count) < std::min(h, w) / 4.0,
          "disparity too large for the view size");

  struct Wave {
    double fx, fy, phase, amp;
  };
  Rng rng(seed);
  std::array<std::vector<Wave>, 3> waves;
  constexpr int kWaves = 6;
  for (auto& channel : waves) {
    for (int i = 0; i < kWaves; ++i) {
      const double period = rng.uniform(10.0, 40.0);
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double f = 2.0 * std::numbers::pi / period;
      channel.push_back({f * std::cos(angle), f * std::sin(angle), rng.uniform(0.0, 2.0 * std::numbers::pi),
                         rng.uniform(0.3, 1.0)});
    }
    double total = 0;
    for (const auto& wv : channel) total += wv.amp;
    for (auto& wv : channel) wv.amp *= 0.42 / total;
  }

  const double uc = (u_count - 1) / 2.0, vc = (v_count - 1) / 2.0;
  LightField lf(u_count, v_count, h, w);
  for (int u = 0; u < u_count; ++u) {
    for (int v = 0; v < v_count; ++v) {
      const double sx = disparity * (u - uc), sy = disparity * (v - vc);
      Image& img = lf.view({u, v});
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double px = x - sx, py = y - sy;
          for (int c = 0; c < 3; ++c) {
            double val = 0.5;
            for (const auto& wv : waves[c]) val += wv.amp * std::sin(wv.fx * px + wv.fy * py + wv.phase);
            img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(val * 255.0), 0L, 255L));
          }
        }
      }
    }
  }
  return lf;
}

}  // namespace sanr
