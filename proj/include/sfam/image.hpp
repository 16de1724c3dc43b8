#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sfam/error.hpp"

namespace sfam {

/// Dense row-major 2D grid. Used for intensity, depth, flow planes and masks.
template <typename T>
class Image {
public:
  using value_type = T;

  Image() = default;
  Image(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(checked(width) * checked(height)), fill) {}

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> pixels() noexcept { return data_; }
  std::span<const T> pixels() const noexcept { return data_; }

  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  bool contains(int x, int y) const noexcept {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  bool same_shape(const Image& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_;
  }
  template <typename U>
  bool same_shape(const Image<U>& o) const noexcept {
    return width_ == o.width() && height_ == o.height();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Image& a, const Image& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.data_ == b.data_;
  }

private:
  static int checked(int n) {
    if (n < 0) throw DataError("negative image dimension");
    return n;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using ImageD = Image<double>;
using Mask = Image<unsigned char>;

template <typename T, typename U>
void require_same_shape(const Image<T>& a, const Image<U>& b, const char* what) {
  if (a.width() != b.width() || a.height() != b.height())
    throw DataError(std::string("dimension mismatch: ") + what);
}

/// Bilinear sample with coordinates clamped to the image border.
inline double sample_bilinear(const ImageD& img, double x, double y) {
  const int w = img.width();
  const int h = img.height();
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = std::min(static_cast<int>(x), w - 1);
  const int y0 = std::min(static_cast<int>(y), h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double ax = x - x0;
  const double ay = y - y0;
  const double top = (1.0 - ax) * img(x0, y0) + ax * img(x1, y0);
  const double bot = (1.0 - ax) * img(x0, y1) + ax * img(x1, y1);
  return (1.0 - ay) * top + ay * bot;
}

// Central differences inside, one-sided at the border.
inline void gradient_central(const ImageD& img, ImageD& gx, ImageD& gy) {
  const int w = img.width();
  const int h = img.height();
  gx = ImageD(w, h);
  gy = ImageD(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
      const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
      gx(x, y) = xp > xm ? (img(xp, y) - img(xm, y)) / (xp - xm) : 0.0;
      gy(x, y) = yp > ym ? (img(x, yp) - img(x, ym)) / (yp - ym) : 0.0;
    }
  }
}

/// 2x2 box downsampling; odd trailing rows/columns fold into the last cell.
inline ImageD downsample_mean(const ImageD& img) {
  const int w = std::max(1, img.width() / 2);
  const int h = std::max(1, img.height() / 2);
  ImageD out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double sum = 0.0;
      int n = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int sx = 2 * x + dx, sy = 2 * y + dy;
          if (img.contains(sx, sy)) {
            sum += img(sx, sy);
            ++n;
          }
        }
      out(x, y) = n ? sum / n : 0.0;
    }
  }
  return out;
}

/// 2x2 median of the valid (> 0) depths; 0 when the whole cell is invalid.
inline ImageD downsample_depth_median(const ImageD& depth) {
  const int w = std::max(1, depth.width() / 2);
  const int h = std::max(1, depth.height() / 2);
  ImageD out(w, h);
  double v[4];
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int n = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int sx = 2 * x + dx, sy = 2 * y + dy;
          if (depth.contains(sx, sy) && depth(sx, sy) > 0.0) v[n++] = depth(sx, sy);
        }
      if (n == 0) {
        out(x, y) = 0.0;
        continue;
      }
      std::sort(v, v + n);
      out(x, y) = (n % 2) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    }
  }
  return out;
}

/// Bilinear resize of a coarse grid onto a finer one (pixel-center aligned).
inline ImageD upsample_bilinear(const ImageD& coarse, int width, int height) {
  ImageD out(width, height);
  const double sx = static_cast<double>(coarse.width()) / width;
  const double sy = static_cast<double>(coarse.height()) / height;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      out(x, y) = sample_bilinear(coarse, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
  return out;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

}  // namespace sfam
