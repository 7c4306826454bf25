#pragma once

#include "fundus/image.hpp"
#include "fundus/tensor.hpp"

// vendored single-header nlohmann/json
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

namespace fundus::eval {

inline double rmse(const PlaneF& x, const PlaneF& y) {
  require(x.rows() == y.rows() && x.cols() == y.cols(), "rmse: shape mismatch");
  require(x.size() > 0, "rmse: empty input");
  const double mse =
      (x.cast<double>() - y.cast<double>()).square().sum() / static_cast<double>(x.size());
  return std::sqrt(mse);
}

inline double pearson_corr(const PlaneF& x, const PlaneF& y) {
  require(x.rows() == y.rows() && x.cols() == y.cols(), "correlation: shape mismatch");
  require(x.size() > 1, "correlation: need at least two samples");
  const double n = static_cast<double>(x.size());
  const double mx = x.cast<double>().sum() / n, my = y.cast<double>().sum() / n;
  const auto cx = x.cast<double>() - mx, cy = y.cast<double>() - my;
  const double vx = (cx * cx).sum(), vy = (cy * cy).sum();
  require(vx > 0 && vy > 0, "correlation undefined for zero-variance input");
  return (cx * cy).sum() / std::sqrt(vx * vy);
}

namespace detail {

inline void check_same_shape(const MaskPlane& s, const MaskPlane& g, const char* what) {
  require(s.rows() == g.rows() && s.cols() == g.cols(), std::string(what) + ": shape mismatch");
}

}  // namespace detail

/// 1 - IoU.
inline double overlap_error(const MaskPlane& s, const MaskPlane& g) {
  detail::check_same_shape(s, g, "overlap error");
  require(g.any(), "overlap error needs a nonempty ground-truth mask");
  const double inter = (s && g).cast<double>().sum();
  const double uni = (s || g).cast<double>().sum();
  return 1.0 - inter / uni;
}

struct AccuracyBreakdown {
  double sensitivity = 0, specificity = 0, balanced = 0;
};

inline AccuracyBreakdown balanced_accuracy(const MaskPlane& s, const MaskPlane& g) {
  detail::check_same_shape(s, g, "balanced accuracy");
  double tp = 0, fn = 0, tn = 0, fp = 0;
  for (Eigen::Index y = 0; y < g.rows(); ++y)
    for (Eigen::Index x = 0; x < g.cols(); ++x) {
      if (g(y, x))
        (s(y, x) ? tp : fn) += 1;
      else
        (s(y, x) ? fp : tn) += 1;
    }
  require(tp + fn > 0 && tn + fp > 0,
          "balanced accuracy needs both positive and negative ground truth");
  AccuracyBreakdown a;
  a.sensitivity = tp / (tp + fn);
  a.specificity = tn / (tn + fp);
  a.balanced = 0.5 * (a.sensitivity + a.specificity);
  return a;
}

inline double dice(const MaskPlane& s, const MaskPlane& g) {
  detail::check_same_shape(s, g, "dice");
  const double ns = s.cast<double>().sum(), ng = g.cast<double>().sum();
  require(ns + ng > 0, "dice undefined for two empty masks");
  const double inter = (s && g).cast<double>().sum();
  return 2.0 * inter / (ns + ng);
}

/// Fill of the convex hull of the mask's pixel centers. Convex inputs are
/// fixed points; concave ones gain their cavity.
inline MaskPlane convex_hull_fill(const MaskPlane& mask) {
  const Eigen::Index h = mask.rows(), w = mask.cols();
  MaskPlane out = MaskPlane::Constant(h, w, false);
  struct Pt {
    double x, y;
  };
  std::vector<Pt> pts;
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x)
      if (mask(y, x)) pts.push_back({static_cast<double>(x), static_cast<double>(y)});
  if (pts.empty()) return out;

  // Monotone chain; hull ends up counterclockwise in (x, up-negative y).
  std::sort(pts.begin(), pts.end(),
            [](const Pt& a, const Pt& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  auto cross = [](const Pt& o, const Pt& a, const Pt& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
  };
  std::vector<Pt> hull(2 * pts.size());
  std::size_t k = 0;
  for (const Pt& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k > 1 ? k - 1 : k);  // last point repeats the first

  constexpr double eps = 1e-9;
  if (hull.size() == 1) {
    out(static_cast<Eigen::Index>(std::lround(hull[0].y)),
        static_cast<Eigen::Index>(std::lround(hull[0].x))) = true;
    return out;
  }
  double ymin = hull[0].y, ymax = hull[0].y;
  for (const Pt& p : hull) {
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  for (Eigen::Index y = static_cast<Eigen::Index>(std::ceil(ymin - eps));
       y <= static_cast<Eigen::Index>(std::floor(ymax + eps)); ++y) {
    double xl = std::numeric_limits<double>::infinity(), xr = -xl;
    for (std::size_t i = 0; i < hull.size(); ++i) {
      const Pt& p = hull[i];
      const Pt& q = hull[(i + 1) % hull.size()];
      const double y0 = std::min(p.y, q.y), y1 = std::max(p.y, q.y);
      if (y < y0 - eps || y > y1 + eps) continue;
      if (std::abs(p.y - q.y) < eps) {
        xl = std::min({xl, p.x, q.x});
        xr = std::max({xr, p.x, q.x});
      } else {
        const double t = (y - p.y) / (q.y - p.y);
        const double x = p.x + t * (q.x - p.x);
        xl = std::min(xl, x);
        xr = std::max(xr, x);
      }
    }
    if (xl > xr) continue;
    const Eigen::Index a = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::ceil(xl - eps)));
    const Eigen::Index b =
        std::min<Eigen::Index>(w - 1, static_cast<Eigen::Index>(std::floor(xr + eps)));
    for (Eigen::Index x = a; x <= b; ++x) out(y, x) = true;
  }
  return out;
}

struct DiscCupMasks {
  MaskPlane disc, cup;
};

/// Threshold the 3-class probability map (background / disc rim / cup), then
/// convex-hull both regions. The disc is rim + cup; the cup is clipped to the
/// disc.
inline DiscCupMasks postprocess(const TensorF& prob, double tau = 0.5) {
  require(prob.n == 1 && prob.c == 3, "postprocess expects a single 3-class probability map");
  require(tau > 0 && tau < 1, "threshold must lie strictly inside (0,1)");
  const int h = prob.h, w = prob.w;
  MaskPlane disc_raw(h, w), cup_raw(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Eigen::Index i = static_cast<Eigen::Index>(y) * w + x;
      disc_raw(y, x) = prob.m(1, i) + prob.m(2, i) >= static_cast<float>(tau);
      cup_raw(y, x) = prob.m(2, i) >= static_cast<float>(tau);
    }
  DiscCupMasks masks;
  masks.disc = convex_hull_fill(disc_raw);
  masks.cup = convex_hull_fill(cup_raw) && masks.disc;
  return masks;
}

/// Ratio of inclusive vertical pixel extents. Empty cup gives 0; an empty
/// disc has no extent at all.
inline double vertical_cdr(const MaskPlane& disc, const MaskPlane& cup) {
  detail::check_same_shape(disc, cup, "cdr");
  require(disc.any(), "cdr undefined for an empty disc");
  auto row_extent = [](const MaskPlane& m) {
    Eigen::Index lo = m.rows(), hi = -1;
    for (Eigen::Index y = 0; y < m.rows(); ++y)
      if (m.row(y).any()) {
        lo = std::min(lo, y);
        hi = std::max(hi, y);
      }
    return hi < lo ? 0.0 : static_cast<double>(hi - lo + 1);
  };
  const double cup_extent = row_extent(cup);
  return cup_extent == 0.0 ? 0.0 : cup_extent / row_extent(disc);
}

inline bool classify_glaucoma(double cdr) { return cdr > 0.6; }

struct RocResult {
  double auc = 0;
  std::vector<std::pair<double, double>> curve;  // (false positive rate, true positive rate)
};

/// Threshold sweep over the scores. AUC via rank averaging, which equals
/// trapezoidal integration of the curve with tied scores walked diagonally.
inline RocResult roc_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  require(scores.size() == labels.size(), "roc: scores/labels length mismatch");
  const std::size_t n = scores.size();
  std::size_t npos = 0;
  for (bool b : labels) npos += b;
  const std::size_t nneg = n - npos;
  require(npos > 0 && nneg > 0, "roc needs both classes");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks over tied scores, accumulate positive ranks
  double pos_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]]) pos_rank_sum += avg_rank;
    i = j;
  }
  RocResult r;
  r.auc = (pos_rank_sum - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1)) /
          (static_cast<double>(npos) * static_cast<double>(nneg));

  // curve from the highest threshold down; ties enter as one step
  r.curve.push_back({0.0, 0.0});
  double tp = 0, fp = 0;
  for (std::size_t i = n; i > 0;) {
    std::size_t j = i;
    while (j > 0 && scores[order[j - 1]] == scores[order[i - 1]]) --j;
    for (std::size_t t = j; t < i; ++t) (labels[order[t]] ? tp : fp) += 1;
    r.curve.push_back({fp / static_cast<double>(nneg), tp / static_cast<double>(npos)});
    i = j;
  }
  return r;
}

/// Everything `evaluate` reports for one sample. Depth metrics are left NaN
/// for segmentation-only samples and vice versa; aggregation skips NaNs.
struct MetricsReport {
  std::string id;
  double rmse = std::nan("");
  double corr = std::nan("");
  double e_disc = std::nan(""), e_cup = std::nan("");
  double a_disc = std::nan(""), a_cup = std::nan("");
  double d_disc = std::nan(""), d_cup = std::nan("");
  double cdr_output = std::nan(""), cdr_gt = std::nan("");
  double delta_e = std::nan("");
  bool cdr_defined = true;
};

namespace detail {

inline void accumulate(nlohmann::json& agg, const char* name,
                       const std::vector<double>& values) {
  std::vector<double> v;
  for (double x : values)
    if (std::isfinite(x)) v.push_back(x);
  if (v.empty()) return;
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  agg[name] = {{"mean", mean}, {"std", std::sqrt(var / n)}, {"count", v.size()}};
}

}  // namespace detail

/// Mean / population-std per metric over all samples where it is defined,
/// plus the ROC block when CDR scores with labels are supplied.
inline nlohmann::json aggregate_reports(const std::vector<MetricsReport>& reports,
                                        const std::vector<bool>* glaucoma_labels = nullptr) {
  nlohmann::json agg;
  auto collect = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(field(r));
    return v;
  };
  detail::accumulate(agg, "rmse", collect([](const MetricsReport& r) { return r.rmse; }));
  detail::accumulate(agg, "corr", collect([](const MetricsReport& r) { return r.corr; }));
  detail::accumulate(agg, "E_disc", collect([](const MetricsReport& r) { return r.e_disc; }));
  detail::accumulate(agg, "E_cup", collect([](const MetricsReport& r) { return r.e_cup; }));
  detail::accumulate(agg, "A_disc", collect([](const MetricsReport& r) { return r.a_disc; }));
  detail::accumulate(agg, "A_cup", collect([](const MetricsReport& r) { return r.a_cup; }));
  detail::accumulate(agg, "D_disc", collect([](const MetricsReport& r) { return r.d_disc; }));
  detail::accumulate(agg, "D_cup", collect([](const MetricsReport& r) { return r.d_cup; }));
  detail::accumulate(agg, "CDR_output",
                     collect([](const MetricsReport& r) { return r.cdr_output; }));
  detail::accumulate(agg, "CDR_gt", collect([](const MetricsReport& r) { return r.cdr_gt; }));
  detail::accumulate(agg, "delta_E", collect([](const MetricsReport& r) { return r.delta_e; }));
  agg["samples"] = reports.size();
  int undefined = 0;
  for (const auto& r : reports) undefined += !r.cdr_defined;
  agg["cdr_undefined"] = undefined;

  if (glaucoma_labels) {
    std::vector<double> scores;
    std::vector<bool> labels;
    for (std::size_t i = 0; i < reports.size(); ++i)
      if (std::isfinite(reports[i].cdr_output) && reports[i].cdr_defined) {
        scores.push_back(reports[i].cdr_output);
        labels.push_back((*glaucoma_labels)[i]);
      }
    bool pos = false, neg = false;
    for (bool b : labels) (b ? pos : neg) = true;
    if (pos && neg) {
      const RocResult roc = roc_auc(scores, labels);
      agg["auc"] = roc.auc;
    }
  }
  return agg;
}

}  // namespace fundus::eval
