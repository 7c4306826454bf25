#pragma once

#include "fundus/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace fundus {

/// Inverted, vessel-inpainted green channel in [0,1]; the mask marks the
/// pixels whose values came from inpainting.
struct PseudoDepthMap {
  PlaneF values;
  MaskPlane vessel_mask;
};

namespace morpho {

/// Offsets of a discrete disk of the given radius.
inline std::vector<std::pair<int, int>> disk_offsets(int radius) {
  std::vector<std::pair<int, int>> off;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy * dy + dx * dx <= radius * radius) off.emplace_back(dy, dx);
  return off;
}

enum class Morph { dilate, erode };

/// Max/min filter with replicated borders.
inline PlaneF morph(const PlaneF& p, const std::vector<std::pair<int, int>>& off, Morph op) {
  const int h = static_cast<int>(p.rows()), w = static_cast<int>(p.cols());
  PlaneF out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float v = op == Morph::dilate ? -1e30f : 1e30f;
      for (auto [dy, dx] : off) {
        const float s = p(std::clamp(y + dy, 0, h - 1), std::clamp(x + dx, 0, w - 1));
        v = op == Morph::dilate ? std::max(v, s) : std::min(v, s);
      }
      out(y, x) = v;
    }
  }
  return out;
}

/// closing(p) - p: response of dark structures thinner than the disk.
inline PlaneF black_top_hat(const PlaneF& p, int radius) {
  auto off = disk_offsets(radius);
  return morph(morph(p, off, Morph::dilate), off, Morph::erode) - p;
}

/// Otsu's threshold over a 256-bin histogram of [lo, hi].
inline float otsu_threshold(const PlaneF& p) {
  const float lo = p.minCoeff(), hi = p.maxCoeff();
  constexpr int kBins = 256;
  std::vector<double> hist(kBins, 0.0);
  const double scale = (kBins - 1) / std::max(static_cast<double>(hi - lo), 1e-30);
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < p.cols(); ++x)
      hist[static_cast<int>((p(y, x) - lo) * scale)] += 1.0;
  const double total = static_cast<double>(p.size());
  double sum_all = 0;
  for (int i = 0; i < kBins; ++i) sum_all += i * hist[i];
  double w0 = 0, sum0 = 0, best_var = -1;
  int best_bin = 0;
  for (int t = 0; t < kBins - 1; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 <= 0 || w1 <= 0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best_var) {
      best_var = between;
      best_bin = t;
    }
  }
  return lo + static_cast<float>((best_bin + 0.5) / scale);
}

}  // namespace morpho

/// Dark elongated structures via black-top-hat + Otsu. The disk radius is 7px
/// at 256x256 and scales with resolution. Degenerate responses (flat image,
/// bright-on-dark contrast) give an empty mask.
inline MaskPlane segment_vessels(const PlaneF& green) {
  const int h = static_cast<int>(green.rows()), w = static_cast<int>(green.cols());
  const int radius = std::max(1, static_cast<int>(std::lround(7.0 * std::min(h, w) / 256.0)));
  PlaneF response = morpho::black_top_hat(green, radius);
  const float range = response.maxCoeff() - response.minCoeff();
  MaskPlane mask = MaskPlane::Constant(h, w, false);
  // Black-top-hat of an image with no dark fine structure is ~flat; a
  // threshold computed from numeric noise would mark garbage.
  if (range < 1e-5f * std::max(1.0f, std::abs(green.maxCoeff()))) return mask;
  const float t = morpho::otsu_threshold(response);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) mask(y, x) = response(y, x) > t;
  // A vessel mask covering most of the image is a detection failure, not
  // vasculature; fall back to no inpainting.
  if (mask.cast<int>().sum() > h * w / 2) return MaskPlane::Constant(h, w, false);
  return mask;
}

inline MaskPlane segment_vessels(const FundusImage& img) {
  require(img.image.channels() == 3, "vessel detection expects RGB");
  return segment_vessels(img.image.planes[1]);
}

/// Jacobi diffusion: masked pixels relax to the average of their 4-neighbors
/// until the largest per-pixel change drops below `tol` (capped iterations).
/// Unmasked pixels are never touched.
inline PlaneF inpaint(const PlaneF& channel, const MaskPlane& mask, float tol = 1e-4f,
                      int max_iters = 500) {
  require(channel.rows() == mask.rows() && channel.cols() == mask.cols(),
          "inpaint: mask shape mismatch");
  const int h = static_cast<int>(channel.rows()), w = static_cast<int>(channel.cols());
  const Eigen::Index masked = mask.cast<Eigen::Index>().sum();
  if (masked == 0) return channel;
  if (masked == static_cast<Eigen::Index>(h) * w) fail("inpaint: mask covers every pixel");

  // Seed holes at the unmasked mean for faster settling.
  double seed_sum = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (!mask(y, x)) seed_sum += channel(y, x);
  const float seed = static_cast<float>(seed_sum / (static_cast<double>(h) * w - masked));

  PlaneF cur = channel;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask(y, x)) cur(y, x) = seed;

  PlaneF next = cur;
  for (int it = 0; it < max_iters; ++it) {
    float worst = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!mask(y, x)) continue;
        float acc = 0;
        int n = 0;
        if (y > 0) acc += cur(y - 1, x), ++n;
        if (y + 1 < h) acc += cur(y + 1, x), ++n;
        if (x > 0) acc += cur(y, x - 1), ++n;
        if (x + 1 < w) acc += cur(y, x + 1), ++n;
        next(y, x) = acc / static_cast<float>(n);
        worst = std::max(worst, std::abs(next(y, x) - cur(y, x)));
      }
    }
    cur.swap(next);
    if (worst < tol) break;
  }
  return cur;
}

/// Pseudo-depth target: invert the min-max-rescaled green channel, then
/// inpaint the detected vasculature. Output stays in [0,1].
inline PseudoDepthMap make_pseudo_depth(const FundusImage& img, const MaskPlane& mask) {
  require(img.image.channels() == 3, "pseudo-depth expects RGB");
  PlaneF inverted = 1.0f - minmax01(img.image.planes[1]);
  PseudoDepthMap pd;
  pd.vessel_mask = mask;
  pd.values = inpaint(inverted, mask);
  return pd;
}

inline PseudoDepthMap make_pseudo_depth(const FundusImage& img) {
  return make_pseudo_depth(img, segment_vessels(img));
}

}  // namespace fundus
