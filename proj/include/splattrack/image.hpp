#pragma once

#include <cstdint>
#include <vector>

namespace splattrack {

/// Dense row-major image with C interleaved channels.
template <typename T, int C = 1>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<size_t>(w) * h * C, fill) {}

  T& at(int x, int y, int c = 0) { return data[(static_cast<size_t>(y) * width + x) * C + c]; }
  const T& at(int x, int y, int c = 0) const { return data[(static_cast<size_t>(y) * width + x) * C + c]; }

  bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  size_t pixel_count() const { return static_cast<size_t>(width) * height; }
  bool empty() const { return data.empty(); }
};

using ImageF = Image<float, 1>;
using ImageF3 = Image<float, 3>;
using ImageD = Image<double, 1>;
using ImageD3 = Image<double, 3>;
using ImageU8 = Image<std::uint8_t, 1>;

}  // namespace splattrack
