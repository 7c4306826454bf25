#include "fundus/plot.hpp"

#include "fundus/png_io.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>

namespace fundus {

namespace {

// 5x7 glyphs, column bits bottom-to-top; coverage: digits, A-Z and a few
// symbols. Unknown characters render as space.
struct Glyph {
  char ch;
  std::array<uint8_t, 5> cols;
};

constexpr Glyph kFont[] = {
    {'0', {0x3e, 0x51, 0x49, 0x45, 0x3e}}, {'1', {0x00, 0x42, 0x7f, 0x40, 0x00}},
    {'2', {0x42, 0x61, 0x51, 0x49, 0x46}}, {'3', {0x21, 0x41, 0x45, 0x4b, 0x31}},
    {'4', {0x18, 0x14, 0x12, 0x7f, 0x10}}, {'5', {0x27, 0x45, 0x45, 0x45, 0x39}},
    {'6', {0x3c, 0x4a, 0x49, 0x49, 0x30}}, {'7', {0x01, 0x71, 0x09, 0x05, 0x03}},
    {'8', {0x36, 0x49, 0x49, 0x49, 0x36}}, {'9', {0x06, 0x49, 0x49, 0x29, 0x1e}},
    {'A', {0x7e, 0x11, 0x11, 0x11, 0x7e}}, {'B', {0x7f, 0x49, 0x49, 0x49, 0x36}},
    {'C', {0x3e, 0x41, 0x41, 0x41, 0x22}}, {'D', {0x7f, 0x41, 0x41, 0x22, 0x1c}},
    {'E', {0x7f, 0x49, 0x49, 0x49, 0x41}}, {'F', {0x7f, 0x09, 0x09, 0x09, 0x01}},
    {'G', {0x3e, 0x41, 0x49, 0x49, 0x7a}}, {'H', {0x7f, 0x08, 0x08, 0x08, 0x7f}},
    {'I', {0x00, 0x41, 0x7f, 0x41, 0x00}}, {'J', {0x20, 0x40, 0x41, 0x3f, 0x01}},
    {'K', {0x7f, 0x08, 0x14, 0x22, 0x41}}, {'L', {0x7f, 0x40, 0x40, 0x40, 0x40}},
    {'M', {0x7f, 0x02, 0x0c, 0x02, 0x7f}}, {'N', {0x7f, 0x04, 0x08, 0x10, 0x7f}},
    {'O', {0x3e, 0x41, 0x41, 0x41, 0x3e}}, {'P', {0x7f, 0x09, 0x09, 0x09, 0x06}},
    {'Q', {0x3e, 0x41, 0x51, 0x21, 0x5e}}, {'R', {0x7f, 0x09, 0x19, 0x29, 0x46}},
    {'S', {0x46, 0x49, 0x49, 0x49, 0x31}}, {'T', {0x01, 0x01, 0x7f, 0x01, 0x01}},
    {'U', {0x3f, 0x40, 0x40, 0x40, 0x3f}}, {'V', {0x1f, 0x20, 0x40, 0x20, 0x1f}},
    {'W', {0x3f, 0x40, 0x38, 0x40, 0x3f}}, {'X', {0x63, 0x14, 0x08, 0x14, 0x63}},
    {'Y', {0x07, 0x08, 0x70, 0x08, 0x07}}, {'Z', {0x61, 0x51, 0x49, 0x45, 0x43}},
    {'.', {0x00, 0x60, 0x60, 0x00, 0x00}}, {'-', {0x08, 0x08, 0x08, 0x08, 0x08}},
    {'=', {0x14, 0x14, 0x14, 0x14, 0x14}}, {'(', {0x00, 0x1c, 0x22, 0x41, 0x00}},
    {')', {0x00, 0x41, 0x22, 0x1c, 0x00}}, {',', {0x00, 0x50, 0x30, 0x00, 0x00}},
    {'/', {0x20, 0x10, 0x08, 0x04, 0x02}}, {':', {0x00, 0x36, 0x36, 0x00, 0x00}},
};

const std::array<uint8_t, 5>* find_glyph(char c) {
  c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : kFont)
    if (g.ch == c) return &g.cols;
  return nullptr;
}

struct Rgb {
  float r, g, b;
};

constexpr Rgb kPalette[] = {{0.84f, 0.16f, 0.16f}, {0.12f, 0.35f, 0.75f},
                            {0.13f, 0.55f, 0.13f}, {0.85f, 0.55f, 0.05f},
                            {0.55f, 0.15f, 0.65f}, {0.05f, 0.60f, 0.60f}};

struct Canvas {
  ImageF img;
  Canvas(int h, int w) : img(3, h, w) {
    for (auto& p : img.planes) p.setConstant(1.0f);
  }
  void put(int y, int x, Rgb c) {
    if (y < 0 || x < 0 || y >= img.height() || x >= img.width()) return;
    img.planes[0](y, x) = c.r;
    img.planes[1](y, x) = c.g;
    img.planes[2](y, x) = c.b;
  }
  void line(double y0, double x0, double y1, double x1, Rgb c) {
    const int steps = std::max(2, static_cast<int>(std::ceil(
                                      std::max(std::abs(y1 - y0), std::abs(x1 - x0)))) *
                                      2);
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      put(static_cast<int>(std::lround(y0 + t * (y1 - y0))),
          static_cast<int>(std::lround(x0 + t * (x1 - x0))), c);
    }
  }
  void text(int y, int x, const std::string& s, Rgb c) {
    for (char ch : s) {
      if (const auto* cols = find_glyph(ch)) {
        for (int cx = 0; cx < 5; ++cx)
          for (int cy = 0; cy < 7; ++cy)
            if ((*cols)[cx] >> cy & 1) put(y + cy, x + cx, c);
      }
      x += 6;
    }
  }
};

}  // namespace

void render_line_plot(const std::string& path, const std::string& title,
                      const std::string& xlabel, const std::string& ylabel,
                      const std::vector<PlotSeries>& series, int width, int height) {
  Canvas cv(height, width);
  const Rgb black{0.f, 0.f, 0.f}, grey{0.82f, 0.82f, 0.82f};
  const int ml = 52, mr = 22, mt = 34, mb = 44;
  const int x0 = ml, x1 = width - mr, y0 = height - mb, y1 = mt;
  auto px = [&](double v) { return x0 + v * (x1 - x0); };
  auto py = [&](double v) { return y0 + v * (y1 - y0); };

  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    cv.line(py(v), x0, py(v), x1, grey);
    cv.line(y0, px(v), y1, px(v), grey);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    cv.text(static_cast<int>(py(v)) - 3, x0 - 34, buf, black);
    cv.text(y0 + 8, static_cast<int>(px(v)) - 12, buf, black);
  }
  cv.line(y0, x0, y0, x1, black);
  cv.line(y0, x0, y1, x0, black);
  cv.text(y1 - 22, x0, title, black);
  cv.text(y0 + 24, (x0 + x1) / 2 - 3 * static_cast<int>(xlabel.size()), xlabel, black);
  cv.text(y1 - 10, x0 - 40, ylabel, black);

  int legend_y = y1 + 8;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const Rgb c = kPalette[s % std::size(kPalette)];
    const auto& sr = series[s];
    for (std::size_t i = 1; i < sr.x.size(); ++i)
      cv.line(py(sr.y[i - 1]), px(sr.x[i - 1]), py(sr.y[i]), px(sr.x[i]), c);
    if (!sr.label.empty()) {
      cv.line(legend_y + 3, x1 - 150, legend_y + 3, x1 - 130, c);
      cv.text(legend_y, x1 - 124, sr.label, black);
      legend_y += 12;
    }
  }
  write_png8(path, cv.img);
}

}  // namespace fundus
