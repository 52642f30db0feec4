#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vcc/error.hpp"
#include "vcc/tensor.hpp"

namespace vcc {

/// 8-bit RGB raster, rows top to bottom, interleaved channels.
struct ImageFile {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  friend bool operator==(const ImageFile&, const ImageFile&) = default;
};

inline Tensor to_tensor(const ImageFile& img) {
  require(img.width >= 1 && img.height >= 1 && img.pixels.size() == static_cast<std::size_t>(img.width) * img.height * 3,
          ErrorKind::invalid_input, "malformed image");
  Tensor t({3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(c, y, x) = static_cast<float>(img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c]) / 255.0f;
  return t;
}

inline ImageFile to_image(const Tensor& t) {
  require(t.rank() == 3 && t.dim(0) == 3, ErrorKind::invalid_input, "expected a 3 x H x W tensor");
  ImageFile img{t.dim(2), t.dim(1), {}};
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(t.at(c, y, x)), 0.0, 1.0);
        img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

/// Source coordinate and weights for half-pixel-centre bilinear sampling.
struct BilinearTap {
  int i0;
  int i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

inline std::vector<BilinearTap> bilinear_taps(int src, int dst) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(dst));
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (int i = 0; i < dst; ++i) {
    double s = (i + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, src - 1);
    taps[i] = {i0, i1, s - i0};
  }
  return taps;
}

/// Bilinear resize of a C x H x W tensor; identity when sizes already match.
inline Tensor resize_bilinear(const Tensor& src, int height, int width) {
  require(src.rank() == 3 && height >= 1 && width >= 1, ErrorKind::invalid_input, "resize expects C x H x W");
  if (src.dim(1) == height && src.dim(2) == width) return src;
  const auto ty = bilinear_taps(src.dim(1), height);
  const auto tx = bilinear_taps(src.dim(2), width);
  Tensor out({src.dim(0), height, width});
  for (int c = 0; c < src.dim(0); ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const auto& a = ty[y];
        const auto& b = tx[x];
        const double top = (1 - b.w1) * src.at(c, a.i0, b.i0) + b.w1 * src.at(c, a.i0, b.i1);
        const double bot = (1 - b.w1) * src.at(c, a.i1, b.i0) + b.w1 * src.at(c, a.i1, b.i1);
        out.at(c, y, x) = static_cast<float>((1 - a.w1) * top + a.w1 * bot);
      }
  return out;
}

}  // namespace vcc
