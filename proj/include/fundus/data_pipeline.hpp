#pragma once

#include "fundus/image.hpp"
#include "fundus/manifest.hpp"
#include "fundus/npy.hpp"
#include "fundus/png_io.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace fundus {

/// RGB fundus crop plus bookkeeping. Raw pixels live in [0,1];
/// `normalized` flips once the channels carry canonical statistics.
struct FundusImage {
  ImageF image;  // 3 planes
  bool normalized = false;
  std::string source_id;

  int height() const { return image.height(); }
  int width() const { return image.width(); }
};

/// Per-channel target statistics taken from one reference image.
struct CanonicalStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};

  void validate() const {
    for (int c = 0; c < 3; ++c)
      require(stddev[c] > 0, "canonical std must be positive (channel " + std::to_string(c) + ")");
  }
};

inline CanonicalStats canonical_stats_of(const ImageF& img) {
  require(img.channels() == 3, "canonical stats need an RGB image");
  CanonicalStats s;
  for (int c = 0; c < 3; ++c) plane_mean_std(img.planes[c], s.mean[c], s.stddev[c]);
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// ROI crop and normalization
// ---------------------------------------------------------------------------

/// Square crop centered on the box; the box must lie fully inside the image.
inline FundusImage crop_roi(const FundusImage& in, const RoiBox& box) {
  require(box.side > 0, "roi side must be positive");
  const int half = box.side / 2;
  const int y0 = box.center_y - half;
  const int x0 = box.center_x - half;
  if (y0 < 0 || x0 < 0 || y0 + box.side > in.height() || x0 + box.side > in.width())
    fail("roi box out of bounds: center (" + std::to_string(box.center_x) + "," +
         std::to_string(box.center_y) + ") side " + std::to_string(box.side) + " in " +
         std::to_string(in.width()) + "x" + std::to_string(in.height()) + " image");
  FundusImage out;
  out.normalized = in.normalized;
  out.source_id = in.source_id;
  out.image = ImageF(in.image.channels(), box.side, box.side);
  for (int c = 0; c < in.image.channels(); ++c)
    out.image.planes[c] = crop(in.image.planes[c], y0, x0, box.side, box.side);
  return out;
}

inline ImageF resize_image(const ImageF& img, int out_h, int out_w) {
  ImageF out(img.channels(), out_h, out_w);
  for (int c = 0; c < img.channels(); ++c)
    out.planes[c] = resize_bilinear(img.planes[c], out_h, out_w);
  return out;
}

/// Standardize each channel, then remap affinely so channel c lands on the
/// canonical mean/std. Reapplying with the same stats is a fixed point.
inline FundusImage normalize_to_canonical(const FundusImage& in, const CanonicalStats& stats) {
  stats.validate();
  require(in.image.channels() == 3, "normalize expects RGB");
  FundusImage out = in;
  for (int c = 0; c < 3; ++c) {
    double mean, sd;
    plane_mean_std(in.image.planes[c], mean, sd);
    if (sd <= 0) fail("zero-variance channel " + std::to_string(c) + " cannot be normalized");
    const float scale = static_cast<float>(stats.stddev[c] / sd);
    const float shift = static_cast<float>(stats.mean[c] - mean * stats.stddev[c] / sd);
    out.image.planes[c] = in.image.planes[c] * scale + shift;
  }
  out.normalized = true;
  return out;
}

// ---------------------------------------------------------------------------
// Samples and augmentation
// ---------------------------------------------------------------------------

/// One training sample; targets are optional so the same type feeds the
/// reconstruction, depth, and segmentation pipelines.
struct Sample {
  FundusImage image;
  std::optional<PlaneF> depth;    // [0,1]
  std::optional<LabelPlane> labels;  // class indices
};

struct AugmentPolicy {
  int multiplier = 10;
  double zoom_lo = 0.9, zoom_hi = 1.1;
  double noise_sigma_max = 0.05;
};

namespace detail {

/// Zoom by factor z: crop (z>1) or replicate-pad (z<1) to side/z, then resize
/// back. Labels use nearest-neighbor and pad with class 0.
template <typename S>
Plane<S> zoom_plane(const Plane<S>& p, double z, bool nearest, bool pad_edge) {
  const int h = static_cast<int>(p.rows()), w = static_cast<int>(p.cols());
  const int zh = std::max(1, static_cast<int>(std::lround(h / z)));
  const int zw = std::max(1, static_cast<int>(std::lround(w / z)));
  Plane<S> work;
  if (zh <= h && zw <= w) {
    work = p.block((h - zh) / 2, (w - zw) / 2, zh, zw);
  } else {
    work = Plane<S>::Zero(zh, zw);
    const int oy = (zh - h) / 2, ox = (zw - w) / 2;
    work.block(oy, ox, h, w) = p;
    if (pad_edge) {
      for (int y = 0; y < zh; ++y)
        for (int x = 0; x < zw; ++x)
          if (y < oy || y >= oy + h || x < ox || x >= ox + w)
            work(y, x) = p(std::clamp(y - oy, 0, h - 1), std::clamp(x - ox, 0, w - 1));
    }
  }
  return nearest ? resize_nearest(work, h, w) : resize_bilinear(work, h, w);
}

inline LabelPlane zoom_labels(const LabelPlane& p, double z) {
  return zoom_plane<int>(p, z, true, false);
}

}  // namespace detail

/// Expands one sample into exactly `multiplier` samples: the original first,
/// then randomized flip/zoom/noise variants. Geometric transforms hit image
/// and target alike; noise touches the image only.
inline std::vector<Sample> augment(const Sample& in, const AugmentPolicy& policy,
                                   std::uint64_t seed) {
  require(policy.multiplier >= 1, "augment multiplier must be >= 1");
  std::vector<Sample> out;
  out.reserve(policy.multiplier);
  out.push_back(in);
  std::mt19937_64 rng(mix_seed(seed, 0xA06'0000));
  std::bernoulli_distribution flip_coin(0.5);
  std::uniform_real_distribution<double> zoom_d(policy.zoom_lo, policy.zoom_hi);
  std::uniform_real_distribution<double> sigma_d(0.0, policy.noise_sigma_max);
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (int k = 1; k < policy.multiplier; ++k) {
    const bool flip = flip_coin(rng);
    const double z = zoom_d(rng);
    const double sigma = sigma_d(rng);
    Sample s = in;
    auto geom = [&](PlaneF& p, bool nearest) {
      if (flip) p = flip_horizontal(p);
      p = detail::zoom_plane<float>(p, z, nearest, true);
    };
    for (auto& plane : s.image.image.planes) geom(plane, false);
    if (s.depth) geom(*s.depth, false);
    if (s.labels) {
      if (flip) *s.labels = flip_horizontal(*s.labels);
      *s.labels = detail::zoom_labels(*s.labels, z);
    }
    if (sigma > 0) {
      for (auto& plane : s.image.image.planes)
        for (Eigen::Index y = 0; y < plane.rows(); ++y)
          for (Eigen::Index x = 0; x < plane.cols(); ++x)
            plane(y, x) += static_cast<float>(sigma * gauss(rng));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

enum class SplitMode { k_fold, half };

struct SplitSpec {
  SplitMode mode = SplitMode::k_fold;
  int fold_count = 5;
  std::map<std::string, int> fold_assignments;

  std::vector<std::string> ids_in_fold(int fold) const {
    std::vector<std::string> r;
    for (const auto& [id, f] : fold_assignments)
      if (f == fold) r.push_back(id);
    return r;
  }

  std::vector<std::string> ids_not_in_fold(int fold) const {
    std::vector<std::string> r;
    for (const auto& [id, f] : fold_assignments)
      if (f != fold) r.push_back(id);
    return r;
  }
};

/// Deterministic disjoint folds of near-equal size (difference at most 1).
inline SplitSpec make_splits(std::vector<std::string> ids, SplitMode mode, int fold_count,
                             std::uint64_t seed) {
  if (mode == SplitMode::half) fold_count = 2;
  require(fold_count >= 2, "need at least 2 folds");
  require(static_cast<int>(ids.size()) >= fold_count,
          "cannot split " + std::to_string(ids.size()) + " samples into " +
              std::to_string(fold_count) + " folds");
  std::sort(ids.begin(), ids.end());
  require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), "duplicate sample ids");
  std::mt19937_64 rng(mix_seed(seed, 0x5b17));
  std::shuffle(ids.begin(), ids.end(), rng);
  SplitSpec spec;
  spec.mode = mode;
  spec.fold_count = fold_count;
  for (std::size_t i = 0; i < ids.size(); ++i)
    spec.fold_assignments[ids[i]] = static_cast<int>(i % fold_count);
  return spec;
}

// ---------------------------------------------------------------------------
// Manifest-driven loading
// ---------------------------------------------------------------------------

/// Depth maps load from 16-bit gray PNG in [0,1] or from float32 .npy.
inline PlaneF load_depth(const std::string& path) {
  if (has_png_extension(path)) {
    ImageF img = read_png(path);
    require(img.channels() == 1, "depth PNG must be single-channel: " + path);
    return img.planes[0];
  }
  return plane_from_npy(read_npy(path));
}

/// Label PNGs store the class index directly as the 8-bit gray level.
inline LabelPlane load_labels(const std::string& path) {
  ImageF img = read_png(path);
  require(img.channels() == 1, "label PNG must be single-channel: " + path);
  const PlaneF& p = img.planes[0];
  LabelPlane out(p.rows(), p.cols());
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < p.cols(); ++x)
      out(y, x) = static_cast<int>(std::lround(p(y, x) * 255.0f));
  return out;
}

/// Loads one manifest row, applies the ROI crop when present, and rescales
/// everything to `resolution` (0 keeps native size).
inline Sample load_sample(const DatasetManifest& m, const ManifestEntry& e, int resolution) {
  Sample s;
  s.image.source_id = e.id;
  s.image.image = read_png(resolve_path(m.base_dir, e.image_path));
  require(s.image.image.channels() == 3, "expected RGB image: " + e.image_path);
  if (e.depth_path) s.depth = load_depth(resolve_path(m.base_dir, *e.depth_path));
  if (e.label_path) s.labels = load_labels(resolve_path(m.base_dir, *e.label_path));
  if (e.roi) {
    s.image = crop_roi(s.image, *e.roi);
    const int half = e.roi->side / 2;
    const int y0 = e.roi->center_y - half, x0 = e.roi->center_x - half;
    if (s.depth) *s.depth = crop(*s.depth, y0, x0, e.roi->side, e.roi->side);
    if (s.labels) {
      LabelPlane cropped(e.roi->side, e.roi->side);
      for (int y = 0; y < e.roi->side; ++y)
        for (int x = 0; x < e.roi->side; ++x) cropped(y, x) = (*s.labels)(y0 + y, x0 + x);
      *s.labels = cropped;
    }
  }
  if (resolution > 0 && (s.image.height() != resolution || s.image.width() != resolution)) {
    s.image.image = resize_image(s.image.image, resolution, resolution);
    if (s.depth) *s.depth = resize_bilinear(*s.depth, resolution, resolution);
    if (s.labels) *s.labels = resize_nearest_labels(*s.labels, resolution, resolution);
  }
  return s;
}

}  // namespace fundus
