#pragma once

// 8-bit RGB images, PNG encoding, heatmap overlays and simple curve plots.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include "dflens/error.hpp"
#include "dflens/tensor.hpp"

namespace dflens {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<Rgb> pixels;  // row-major

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, Rgb fill = {}) : width(w), height(h), pixels(w * h, fill) {}
  Rgb& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  const Rgb& at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  bool operator==(const RgbImage&) const = default;
};

// ---------------------------------------------------------------------------
// Colormap: polynomial fit of the turbo map, sampled at 256 points at compile time.

namespace detail {

constexpr double poly5(double x, const double (&c)[6]) {
  return c[0] + x * (c[1] + x * (c[2] + x * (c[3] + x * (c[4] + x * c[5]))));
}

constexpr std::uint8_t unit_to_byte(double v) {
  v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

constexpr std::array<Rgb, 256> make_turbo() {
  constexpr double kr[6] = {0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943};
  constexpr double kg[6] = {0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604};
  constexpr double kb[6] = {0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973};
  std::array<Rgb, 256> lut{};
  for (int i = 0; i < 256; ++i) {
    const double x = i / 255.0;
    lut[static_cast<std::size_t>(i)] = Rgb{unit_to_byte(poly5(x, kr)), unit_to_byte(poly5(x, kg)), unit_to_byte(poly5(x, kb))};
  }
  return lut;
}

}  // namespace detail

inline constexpr std::array<Rgb, 256> kTurbo = detail::make_turbo();

/// Colormap entry for a value in [0, 1] (clamped).
inline Rgb colormap(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return kTurbo[static_cast<std::size_t>(std::lround(c * 255.0))];
}

// ---------------------------------------------------------------------------
// Conversions

/// [3, H, W] (or [1, H, W]) tensor with values in [-1, 1] to RGB; values
/// outside the range are clamped.
inline RgbImage to_rgb(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
    throw ShapeError(concat("to_rgb: expected [3, H, W] or [1, H, W], got ", shape_string(image.shape())));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), plane = h * w;
  auto byte = [](double v) { return detail::unit_to_byte((std::clamp(v, -1.0, 1.0) + 1.0) / 2.0); };
  RgbImage out(w, h);
  for (std::size_t p = 0; p < plane; ++p) {
    const std::size_t g = c == 3 ? 1 : 0, b = c == 3 ? 2 : 0;
    out.pixels[p] = Rgb{byte(image[p]), byte(image[g * plane + p]), byte(image[b * plane + p])};
  }
  return out;
}

inline RgbImage upscale(const RgbImage& img, std::size_t factor) {
  if (factor <= 1) return img;
  RgbImage out(img.width * factor, img.height * factor);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) out.at(x, y) = img.at(x / factor, y / factor);
  }
  return out;
}

/// (1 - alpha) * base + alpha * colormap(map), per channel, rounded.
inline RgbImage render_heatmap(const Tensor& map, const RgbImage& base, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(concat("render_heatmap: alpha must lie in [0, 1], got ", alpha));
  if (map.rank() != 2 || map.dim(0) != base.height || map.dim(1) != base.width) {
    throw ShapeError(concat("render_heatmap: map ", shape_string(map.shape()), " does not match base ", base.height, "x",
                            base.width));
  }
  RgbImage out(base.width, base.height);
  auto blend = [alpha](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround((1.0 - alpha) * a + alpha * b));
  };
  for (std::size_t p = 0; p < out.pixels.size(); ++p) {
    const Rgb c = colormap(map[p]);
    const Rgb& b = base.pixels[p];
    out.pixels[p] = Rgb{blend(b.r, c.r), blend(b.g, c.g), blend(b.b, c.b)};
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// 8-bit RGB PNG, no interlace, filter type 0 on every row.
inline std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  if (img.width == 0 || img.height == 0) throw Error("encode_png: empty image");
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (1 + 3 * img.width));
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    for (std::size_t x = 0; x < img.width; ++x) {
      const Rgb& p = img.at(x, y);
      raw.insert(raw.end(), {p.r, p.g, p.b});
    }
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> packed(packed_size);
  if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw Error("encode_png: zlib compression failed");
  }
  packed.resize(packed_size);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
  detail::put_chunk(out, "IHDR", ihdr);
  detail::put_chunk(out, "IDAT", packed);
  detail::put_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const RgbImage& img, const std::string& path) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(concat("write_png: cannot open '", path, "'"));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(concat("write_png: write to '", path, "' failed"));
}

// ---------------------------------------------------------------------------
// Curve plots

struct PlotSeries {
  std::vector<double> x, y;
  Rgb color;
};

namespace detail {

inline void draw_line(RgbImage& img, long x0, long y0, long x1, long y1, Rgb c) {
  const long dx = std::labs(x1 - x0), dy = -std::labs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  while (true) {
    if (x0 >= 0 && y0 >= 0 && static_cast<std::size_t>(x0) < img.width && static_cast<std::size_t>(y0) < img.height) {
      img.at(static_cast<std::size_t>(x0), static_cast<std::size_t>(y0)) = c;
    }
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

/// Line plot on [0, 1] x [y_min, y_max] with axes and a light grid.
inline RgbImage plot_curves(const std::vector<PlotSeries>& series, double y_min, double y_max,
                            std::size_t width = 320, std::size_t height = 240) {
  if (!(y_max > y_min)) throw Error("plot_curves: empty y range");
  RgbImage img(width, height, Rgb{255, 255, 255});
  const long margin = 20;
  const long x_lo = margin, x_hi = static_cast<long>(width) - margin;
  const long y_lo = margin, y_hi = static_cast<long>(height) - margin;
  auto px = [&](double x) { return x_lo + std::lround(std::clamp(x, 0.0, 1.0) * static_cast<double>(x_hi - x_lo)); };
  auto py = [&](double y) {
    const double u = std::clamp((y - y_min) / (y_max - y_min), 0.0, 1.0);
    return y_hi - std::lround(u * static_cast<double>(y_hi - y_lo));
  };
  const Rgb grid{225, 225, 225}, axis{0, 0, 0};
  for (int k = 1; k <= 4; ++k) {
    const long gx = px(k / 4.0), gy = py(y_min + (y_max - y_min) * k / 4.0);
    detail::draw_line(img, gx, y_lo, gx, y_hi, grid);
    detail::draw_line(img, x_lo, gy, x_hi, gy, grid);
  }
  detail::draw_line(img, x_lo, y_hi, x_hi, y_hi, axis);
  detail::draw_line(img, x_lo, y_lo, x_lo, y_hi, axis);
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.x.size() && i < s.y.size(); ++i) {
      detail::draw_line(img, px(s.x[i - 1]), py(s.y[i - 1]), px(s.x[i]), py(s.y[i]), s.color);
    }
  }
  return img;
}

/// Distinct series colors.
inline Rgb series_color(std::size_t i) {
  static constexpr std::array<Rgb, 6> kColors{Rgb{31, 119, 180}, Rgb{214, 39, 40}, Rgb{44, 160, 44},
                                              Rgb{255, 127, 14}, Rgb{148, 103, 189}, Rgb{140, 86, 75}};
  return kColors[i % kColors.size()];
}

}  // namespace dflens
