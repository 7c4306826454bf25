#pragma once

#include "fundus/common.hpp"

#include <random>
#include <vector>

namespace fundus {

/// Dense activation/parameter tensor with layout (channels) x (batch*h*w).
/// Column index is (b*h + y)*w + x, so each column holds one pixel's channel
/// vector contiguously; 1x1 convolutions and batch norm become plain GEMM and
/// rowwise reductions.
template <typename S>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  MatX<S> m;  // c rows, n*h*w cols

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
    m.setZero(c, static_cast<Eigen::Index>(n) * h * w);
  }

  static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }

  static Tensor scalar(S v) {
    Tensor t(1, 1, 1, 1);
    t.m(0, 0) = v;
    return t;
  }

  Eigen::Index pixels() const { return static_cast<Eigen::Index>(n) * h * w; }
  Eigen::Index size() const { return pixels() * c; }

  Eigen::Index col(int b, int y, int x) const {
    return (static_cast<Eigen::Index>(b) * h + y) * w + x;
  }
  S& at(int b, int ch, int y, int x) { return m(ch, col(b, y, x)); }
  S at(int b, int ch, int y, int x) const { return m(ch, col(b, y, x)); }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  bool all_finite() const { return m.allFinite(); }

  S item() const { return m(0, 0); }

  void fill_randn(std::mt19937_64& rng, S stddev) {
    std::normal_distribution<double> d(0.0, 1.0);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<S>(d(rng)) * stddev;
  }

  /// One image plane of one sample as an h x w array.
  Plane<S> plane(int b, int ch) const {
    Plane<S> p(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) p(y, x) = at(b, ch, y, x);
    return p;
  }

  void set_plane(int b, int ch, const Plane<S>& p) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) at(b, ch, y, x) = p(y, x);
  }

  static Tensor from_planes(const std::vector<Plane<S>>& planes) {
    Tensor t(1, static_cast<int>(planes.size()), static_cast<int>(planes[0].rows()),
             static_cast<int>(planes[0].cols()));
    for (int ch = 0; ch < t.c; ++ch) t.set_plane(0, ch, planes[ch]);
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t(n, c, h, w);
    t.m = m.template cast<T>();
    return t;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Stack single-sample tensors along the batch dimension.
template <typename S>
Tensor<S> batch_stack(const std::vector<Tensor<S>>& items) {
  require(!items.empty(), "batch_stack: empty batch");
  const Tensor<S>& f = items.front();
  Tensor<S> out(static_cast<int>(items.size()) * f.n, f.c, f.h, f.w);
  Eigen::Index at = 0;
  for (const auto& t : items) {
    require(t.c == f.c && t.h == f.h && t.w == f.w, "batch_stack: shape mismatch");
    out.m.middleCols(at, t.pixels()) = t.m;
    at += t.pixels();
  }
  return out;
}

/// Sample b of a batched tensor as its own tensor.
template <typename S>
Tensor<S> batch_slice(const Tensor<S>& t, int b) {
  Tensor<S> out(1, t.c, t.h, t.w);
  out.m = t.m.middleCols(static_cast<Eigen::Index>(b) * t.h * t.w, t.h * t.w);
  return out;
}

}  // namespace fundus
