#pragma once

#include "fundus/common.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace fundus {

/// Planar multi-channel image; values conventionally in [0,1] until
/// normalized.
template <typename S>
struct Image {
  std::vector<Plane<S>> planes;

  Image() = default;
  Image(int channels, int h, int w) : planes(channels, Plane<S>::Zero(h, w)) {}

  int channels() const { return static_cast<int>(planes.size()); }
  int height() const { return planes.empty() ? 0 : static_cast<int>(planes[0].rows()); }
  int width() const { return planes.empty() ? 0 : static_cast<int>(planes[0].cols()); }
};

using ImageF = Image<float>;

template <typename S>
Plane<S> flip_horizontal(const Plane<S>& p) {
  return p.rowwise().reverse();
}

template <typename S>
Plane<S> crop(const Plane<S>& p, int y0, int x0, int h, int w) {
  require(y0 >= 0 && x0 >= 0 && y0 + h <= p.rows() && x0 + w <= p.cols(),
          "crop out of bounds");
  return p.block(y0, x0, h, w);
}

/// Bilinear resize with half-pixel centers. Same-size input is returned
/// unchanged.
template <typename S>
Plane<S> resize_bilinear(const Plane<S>& src, int out_h, int out_w) {
  const int h = static_cast<int>(src.rows()), w = static_cast<int>(src.cols());
  if (h == out_h && w == out_w) return src;
  Plane<S> dst(out_h, out_w);
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                       wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
      dst(y, x) = static_cast<S>(v);
    }
  }
  return dst;
}

template <typename S>
Plane<S> resize_nearest(const Plane<S>& src, int out_h, int out_w) {
  const int h = static_cast<int>(src.rows()), w = static_cast<int>(src.cols());
  if (h == out_h && w == out_w) return src;
  Plane<S> dst(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    int iy = std::min(h - 1, static_cast<int>((y + 0.5) * h / out_h));
    for (int x = 0; x < out_w; ++x) {
      int ix = std::min(w - 1, static_cast<int>((x + 0.5) * w / out_w));
      dst(y, x) = src(iy, ix);
    }
  }
  return dst;
}

inline LabelPlane resize_nearest_labels(const LabelPlane& src, int out_h, int out_w) {
  const int h = static_cast<int>(src.rows()), w = static_cast<int>(src.cols());
  if (h == out_h && w == out_w) return src;
  LabelPlane dst(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    int iy = std::min(h - 1, static_cast<int>((y + 0.5) * h / out_h));
    for (int x = 0; x < out_w; ++x) {
      int ix = std::min(w - 1, static_cast<int>((x + 0.5) * w / out_w));
      dst(y, x) = src(iy, ix);
    }
  }
  return dst;
}

/// Min-max rescale to [0,1]; a constant plane maps to all zeros.
template <typename S>
Plane<S> minmax01(const Plane<S>& p) {
  const S lo = p.minCoeff(), hi = p.maxCoeff();
  if (hi - lo <= S(0)) return Plane<S>::Zero(p.rows(), p.cols());
  return (p - lo) / (hi - lo);
}

template <typename S>
void plane_mean_std(const Plane<S>& p, double& mean, double& stddev) {
  mean = p.template cast<double>().mean();
  stddev = std::sqrt((p.template cast<double>() - mean).square().mean());
}

}  // namespace fundus
