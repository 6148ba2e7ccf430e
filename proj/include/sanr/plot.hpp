#pragma once

// Minimal RGB raster for report figures: lines, boxes, a 3x5 glyph font for
// numbers, and a heat colormap.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>

#include "sanr/lightfield_io.hpp"

namespace sanr::plot {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kBlack{0, 0, 0};
inline constexpr Rgb kWhite{255, 255, 255};
inline constexpr Rgb kGrey{190, 190, 190};

inline Rgb palette(int i) {
  static constexpr std::array<Rgb, 6> colors{{{31, 119, 180}, {214, 39, 40}, {44, 160, 44},
                                              {255, 127, 14}, {148, 103, 189}, {23, 190, 207}}};
  return colors[static_cast<std::size_t>(i) % colors.size()];
}

/// t in [0, 1] -> black, red, yellow, white.
inline Rgb heat(double t) {
  t = std::clamp(t, 0.0, 1.0);
  auto ch = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255)); };
  return {ch(3 * t), ch(3 * t - 1), ch(3 * t - 2)};
}

class Canvas {
 public:
  Canvas(int width, int height, Rgb bg = kWhite) : img_(height, width) {
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) set(x, y, bg);
  }

  int width() const { return img_.width; }
  int height() const { return img_.height; }
  const Image& image() const { return img_; }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
    for (int k = 0; k < 3; ++k) img_.at(y, x, k) = c[k];
  }

  void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) set(x, y, c);
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) err += dy, x0 += sx;
      if (e2 <= dx) err += dx, y0 += sy;
    }
  }

  void marker(int x, int y, Rgb c) { fill_rect(x - 2, y - 2, x + 3, y + 3, c); }

  /// Draws digits, '.', '-' and '%' at integer scale.
  void text(int x, int y, const std::string& s, Rgb c, int scale = 1) {
    for (char ch : s) {
      const auto rows = glyph(ch);
      for (int r = 0; r < 5; ++r)
        for (int col = 0; col < 3; ++col)
          if (rows[r] & (4 >> col)) fill_rect(x + col * scale, y + r * scale, x + (col + 1) * scale, y + (r + 1) * scale, c);
      x += 4 * scale;
    }
  }

  static int text_width(const std::string& s, int scale = 1) { return static_cast<int>(s.size()) * 4 * scale; }

 private:
  static std::array<std::uint8_t, 5> glyph(char c) {
    switch (c) {
      case '0': return {7, 5, 5, 5, 7};
      case '1': return {2, 6, 2, 2, 7};
      case '2': return {7, 1, 7, 4, 7};
      case '3': return {7, 1, 7, 1, 7};
      case '4': return {5, 5, 7, 1, 1};
      case '5': return {7, 4, 7, 1, 7};
      case '6': return {7, 4, 7, 5, 7};
      case '7': return {7, 1, 1, 1, 1};
      case '8': return {7, 5, 7, 5, 7};
      case '9': return {7, 5, 7, 1, 7};
      case '.': return {0, 0, 0, 0, 2};
      case '-': return {0, 0, 7, 0, 0};
      case '%': return {5, 1, 2, 4, 5};
      default: return {0, 0, 0, 0, 0};
    }
  }

  Image img_;
};

inline std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace sanr::plot
