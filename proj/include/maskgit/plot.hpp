#pragma once

// Minimal raster line plots for benchmark and ablation curves. Axes carry
// min/max tick labels in a 3x5 digit font; series are told apart by color
// (the accompanying CSV names them).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "maskgit/errors.hpp"
#include "maskgit/image.hpp"

namespace maskgit {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotOptions {
  int width = 640;
  int height = 400;
  bool log_x = false;
  bool log_y = false;
};

namespace detail {

// 3x5 glyphs, one row per 3-bit mask, for "0123456789.-e+".
inline const std::array<std::uint8_t, 5>* glyph(char ch) {
  static const std::array<std::array<std::uint8_t, 5>, 14> glyphs = {{
      {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
      {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
      {0, 0, 0, 0, 2}, {0, 0, 7, 0, 0}, {0, 7, 5, 6, 7}, {0, 2, 7, 2, 0},
  }};
  static const std::string order = "0123456789.-e+";
  const auto pos = order.find(ch);
  return pos == std::string::npos ? nullptr : &glyphs[pos];
}

inline void put_pixel(Image& img, int x, int y, const std::array<float, 3>& rgb) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int c = 0; c < 3; ++c) img.at(x, y, c) = rgb[static_cast<std::size_t>(c)];
}

inline void draw_text(Image& img, int x, int y, const std::string& text, int scale = 2) {
  for (char ch : text) {
    if (const auto* g = glyph(ch)) {
      for (int r = 0; r < 5; ++r) {
        for (int c = 0; c < 3; ++c) {
          if (!((*g)[static_cast<std::size_t>(r)] >> (2 - c) & 1)) continue;
          for (int dy = 0; dy < scale; ++dy) {
            for (int dx = 0; dx < scale; ++dx) put_pixel(img, x + c * scale + dx, y + r * scale + dy, {0, 0, 0});
          }
        }
      }
    }
    x += 4 * scale;
  }
}

inline void draw_line(Image& img, double x0, double y0, double x1, double y1, const std::array<float, 3>& rgb) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    put_pixel(img, x, y, rgb);
    put_pixel(img, x, y + 1, rgb);
  }
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace detail

inline Image line_plot(const std::vector<PlotSeries>& series, const PlotOptions& opts = {}) {
  static const std::array<std::array<float, 3>, 8> palette = {{
      {0.12f, 0.47f, 0.71f}, {1.0f, 0.5f, 0.05f}, {0.17f, 0.63f, 0.17f}, {0.84f, 0.15f, 0.16f},
      {0.58f, 0.4f, 0.74f}, {0.55f, 0.34f, 0.29f}, {0.89f, 0.47f, 0.76f}, {0.5f, 0.5f, 0.5f},
  }};
  auto tx = [&](double v) { return opts.log_x ? std::log10(v) : v; };
  auto ty = [&](double v) { return opts.log_y ? std::log10(v) : v; };
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw InvalidArgument("plot series '" + s.name + "' has mismatched x and y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if ((opts.log_x && s.x[i] <= 0) || (opts.log_y && s.y[i] <= 0)) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  Image img(opts.width, opts.height, 3, 1.0f);
  const int left = 70, right = 20, top = 20, bottom = 40;
  const int pw = opts.width - left - right, ph = opts.height - top - bottom;
  detail::draw_line(img, left, top, left, top + ph, {0, 0, 0});
  detail::draw_line(img, left, top + ph, left + pw, top + ph, {0, 0, 0});
  if (!std::isfinite(xmin)) return img;
  double lx0 = tx(xmin), lx1 = tx(xmax), ly0 = ty(ymin), ly1 = ty(ymax);
  if (lx1 == lx0) lx1 = lx0 + 1;
  if (ly1 == ly0) ly1 = ly0 + 1;
  auto px = [&](double v) { return left + (tx(v) - lx0) / (lx1 - lx0) * pw; };
  auto py = [&](double v) { return top + ph - (ty(v) - ly0) / (ly1 - ly0) * ph; };
  detail::draw_text(img, left, top + ph + 8, detail::tick_label(xmin));
  const std::string xl = detail::tick_label(xmax);
  detail::draw_text(img, left + pw - static_cast<int>(xl.size()) * 8, top + ph + 8, xl);
  detail::draw_text(img, 4, top + ph - 10, detail::tick_label(ymin));
  detail::draw_text(img, 4, top, detail::tick_label(ymax));
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto& color = palette[k % palette.size()];
    bool have_prev = false;
    double prev_x = 0, prev_y = 0;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]) || (opts.log_x && s.x[i] <= 0) ||
          (opts.log_y && s.y[i] <= 0)) {
        have_prev = false;
        continue;
      }
      const double x = px(s.x[i]), y = py(s.y[i]);
      for (int d = -2; d <= 2; ++d) detail::draw_line(img, x - 2, y + d, x + 2, y + d, color);
      if (have_prev) detail::draw_line(img, prev_x, prev_y, x, y, color);
      prev_x = x;
      prev_y = y;
      have_prev = true;
    }
  }
  return img;
}

}  // namespace maskgit
