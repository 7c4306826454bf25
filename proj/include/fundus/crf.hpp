#pragma once

#include "fundus/image.hpp"
#include "fundus/tensor.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace fundus::crf {

/// Pairwise kernel: w1 (appearance: position + color), w2 (depth: position +
/// depth), w3 (smoothness: position only). All position terms share
/// theta_alpha. theta_beta is in 0-255 intensity units, theta_gamma in depth
/// units, theta_alpha in pixels.
struct CrfParams {
  double w1 = 5.0, w2 = 5.0, w3 = 3.0;
  double theta_alpha = 30.0, theta_beta = 10.0, theta_gamma = 0.1;
  int iterations = 10;

  void validate() const {
    require(w1 >= 0 && w2 >= 0 && w3 >= 0, "kernel weights must be nonnegative");
    require(theta_alpha > 0 && theta_beta > 0 && theta_gamma > 0,
            "kernel bandwidths must be positive");
    require(iterations >= 0, "iterations must be >= 0");
  }
};

/// Negative log-probabilities, one row per class, one column per pixel
/// (i = y*w + x).
struct UnaryField {
  MatX<float> nlog;
  int h = 0, w = 0;

  int classes() const { return static_cast<int>(nlog.rows()); }
  Eigen::Index pixels() const { return nlog.cols(); }
};

/// Refined distribution plus its argmax labeling.
struct CrfResult {
  MatX<float> q;  // classes x pixels, columns sum to 1
  LabelPlane labels;
};

inline UnaryField compute_unary(const TensorF& prob) {
  require(prob.n == 1, "unary expects a single-image tensor");
  UnaryField u;
  u.h = prob.h;
  u.w = prob.w;
  u.nlog = (-prob.m.array().max(1e-8f).min(1.0f).log()).matrix();
  return u;
}

/// Eq. 8 evaluated directly for one pixel pair; positions in pixels,
/// intensities in [0,1], depth in its own units.
inline double pairwise_kernel(int yi, int xi, int yj, int xj, const float* rgb_i,
                              const float* rgb_j, float depth_i, float depth_j,
                              bool has_depth, const CrfParams& p) {
  const double dy = yi - yj, dx = xi - xj;
  const double pos = (dy * dy + dx * dx) / (2.0 * p.theta_alpha * p.theta_alpha);
  double color = 0;
  for (int c = 0; c < 3; ++c) {
    const double d = (static_cast<double>(rgb_i[c]) - rgb_j[c]) * 255.0;
    color += d * d;
  }
  color /= 2.0 * p.theta_beta * p.theta_beta;
  double k = p.w1 * std::exp(-pos - color) + p.w3 * std::exp(-pos);
  if (has_depth && p.w2 > 0) {
    const double dd = static_cast<double>(depth_i) - depth_j;
    k += p.w2 * std::exp(-pos - dd * dd / (2.0 * p.theta_gamma * p.theta_gamma));
  }
  return k;
}

namespace detail {

/// Feature matrix for one kernel: rows = feature dims (already divided by
/// their bandwidths so the Gaussian has unit variance), cols = pixels.
inline MatX<float> position_features(int h, int w, double theta_alpha) {
  MatX<float> f(2, static_cast<Eigen::Index>(h) * w);
  Eigen::Index i = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x, ++i) {
      f(0, i) = static_cast<float>(y / theta_alpha);
      f(1, i) = static_cast<float>(x / theta_alpha);
    }
  return f;
}

inline MatX<float> appearance_features(const ImageF& img, double theta_alpha,
                                       double theta_beta) {
  const int h = img.height(), w = img.width();
  MatX<float> f(5, static_cast<Eigen::Index>(h) * w);
  f.topRows(2) = position_features(h, w, theta_alpha);
  Eigen::Index i = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x, ++i)
      for (int c = 0; c < 3; ++c)
        f(2 + c, i) = static_cast<float>(img.planes[c](y, x) * 255.0 / theta_beta);
  return f;
}

inline MatX<float> depth_features(const PlaneF& depth, double theta_alpha,
                                  double theta_gamma) {
  const int h = static_cast<int>(depth.rows()), w = static_cast<int>(depth.cols());
  MatX<float> f(3, static_cast<Eigen::Index>(h) * w);
  f.topRows(2) = position_features(h, w, theta_alpha);
  Eigen::Index i = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x, ++i) f(2, i) = static_cast<float>(depth(y, x) / theta_gamma);
  return f;
}

}  // namespace detail

/// Brute-force unit-weight message: M(c,i) = sum_{j != i} exp(-|f_i-f_j|^2/2)
/// * Q(c,j). Quadratic in pixels; this is the test oracle and the small-image
/// path.
inline MatX<float> exact_message_pass(const MatX<float>& q, const MatX<float>& features) {
  const Eigen::Index n = q.cols();
  require(features.cols() == n, "message pass: feature/Q size mismatch");
  require(n <= 4096, "exact message pass is quadratic; use the fast path above 64x64");
  MatX<float> kernel(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    kernel.col(j) = ((features.colwise() - features.col(j)).colwise().squaredNorm() * -0.5f)
                        .array()
                        .exp()
                        .matrix()
                        .transpose();
    kernel(j, j) = 0.0f;  // self-interaction excluded
  }
  return q * kernel;
}

/// Gaussian blur on a regular feature lattice: quadratic B-spline splat,
/// separable blur, quadratic slice, with the pixel's own splat-blur-slice
/// mass removed in closed form. Approximates exact_message_pass at
/// O(N * 3^d + grid). Linear interpolation would be cheaper but carries a
/// percent-level phase ripple; the quadratic spline pushes it below 1e-3 at
/// the default lattice resolution.
inline MatX<float> fast_message_pass(const MatX<float>& q, const MatX<float>& features,
                                     double max_cells_per_sigma = 16.0,
                                     long cell_budget = 4'000'000) {
  const int d = static_cast<int>(features.rows());
  const Eigen::Index n = q.cols();
  require(features.cols() == n, "message pass: feature/Q size mismatch");
  require(d >= 1 && d <= 6, "feature dimensionality out of range");
  require(cell_budget >= 1024 && max_cells_per_sigma > 0, "lattice budget out of range");

  VecX<float> lo(d), extent(d);
  for (int k = 0; k < d; ++k) {
    lo[k] = features.row(k).minCoeff();
    extent[k] = features.row(k).maxCoeff() - lo[k];
  }

  // Finest lattice that fits the cell budget. Mass blurred past the lattice
  // edge is never sliced, so the spline's one-cell apron is the only padding.
  auto cell_count = [&](double c) {
    double total = 1;
    for (int k = 0; k < d; ++k) total *= std::floor(static_cast<double>(extent[k]) * c) + 4;
    return total;
  };
  double cps = max_cells_per_sigma;
  if (cell_count(cps) > static_cast<double>(cell_budget)) {
    double lo_c = 0, hi_c = max_cells_per_sigma;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo_c + hi_c);
      (cell_count(mid) <= static_cast<double>(cell_budget) ? lo_c : hi_c) = mid;
    }
    cps = lo_c;
  }
  std::vector<long> dims(d);
  long cells = 1;
  for (int k = 0; k < d; ++k) {
    dims[k] = static_cast<long>(std::floor(static_cast<double>(extent[k]) * cps)) + 4;
    cells *= dims[k];
  }

  // Splat and slice each convolve with a quadratic B-spline (variance 1/4
  // cell^2), so the explicit blur supplies the rest of the target variance
  // cps^2 (one feature sigma).
  const double sb2 = std::max(cps * cps - 0.5, 0.05);
  const double sb = std::sqrt(sb2);
  const long radius = std::max<long>(1, static_cast<long>(std::ceil(4.0 * sb + 0.5)));
  const double g1 = std::exp(-1.0 / (2.0 * sb2)), g2 = std::exp(-4.0 / (2.0 * sb2));

  // Unit-amplitude normalization from the spline-blur-spline composite,
  // averaged over sub-cell phase.
  auto spline3 = [](double s, double w[3]) {
    w[0] = 0.5 * (0.5 - s) * (0.5 - s);
    w[2] = 0.5 * (0.5 + s) * (0.5 + s);
    w[1] = 1.0 - w[0] - w[2];
  };
  auto composite_peak = [&](double s) {
    double w[3];
    spline3(s, w);
    return (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]) + 2 * g1 * (w[0] * w[1] + w[1] * w[2]) +
           2 * g2 * (w[0] * w[2]);
  };
  const double amp =
      4.0 / (composite_peak(0.0) + 2 * composite_peak(0.25) + composite_peak(0.5));

  std::vector<float> taps(static_cast<std::size_t>(2 * radius + 1));
  for (long m = -radius; m <= radius; ++m)
    taps[static_cast<std::size_t>(m + radius)] =
        static_cast<float>(amp * std::exp(-static_cast<double>(m * m) / (2.0 * sb2)));

  std::vector<long> stride(d);
  {
    long acc = 1;
    for (int k = d - 1; k >= 0; --k) {
      stride[k] = acc;
      acc *= dims[k];
    }
  }

  // Per-pixel center cell, spline weights, and the closed-form coefficient
  // its own mass picks up through splat - blur - slice.
  MatX<float> weight(3 * d, n);
  Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> center(d, n);
  VecX<float> self_coeff(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double coeff = 1.0;
    for (int k = 0; k < d; ++k) {
      const double u = (features(k, i) - lo[k]) * cps + 1.5;
      long c = std::lround(u);
      c = std::min(std::max(c, long(1)), dims[k] - 2);
      const double s = std::min(std::max(u - c, -0.5), 0.5);
      double w[3];
      spline3(s, w);
      center(k, i) = c;
      for (int a = 0; a < 3; ++a) weight(3 * k + a, i) = static_cast<float>(w[a]);
      coeff *= amp * ((w[0] * w[0] + w[1] * w[1] + w[2] * w[2]) +
                      2 * g1 * (w[0] * w[1] + w[1] * w[2]) + 2 * g2 * (w[0] * w[2]));
    }
    self_coeff[i] = static_cast<float>(coeff);
  }

  int corners = 1;
  for (int k = 0; k < d; ++k) corners *= 3;
  std::vector<float> grid(static_cast<std::size_t>(cells));
  std::vector<float> tmp(static_cast<std::size_t>(cells));
  MatX<float> out(q.rows(), n);

  for (Eigen::Index ch = 0; ch < q.rows(); ++ch) {
    std::fill(grid.begin(), grid.end(), 0.0f);
    for (Eigen::Index i = 0; i < n; ++i) {
      const float v = q(ch, i);
      for (int corner = 0; corner < corners; ++corner) {
        float wgt = v;
        long at = 0;
        for (int k = 0, digits = corner; k < d; ++k, digits /= 3) {
          const int a = digits % 3;
          wgt *= weight(3 * k + a, i);
          at += (center(k, i) + a - 1) * stride[k];
        }
        grid[static_cast<std::size_t>(at)] += wgt;
      }
    }

    // Separable blur along each lattice axis (zero beyond the lattice).
    for (int k = 0; k < d; ++k) {
      std::fill(tmp.begin(), tmp.end(), 0.0f);
      const long dim = dims[k], str = stride[k];
      const long lines = cells / dim;
      for (long line = 0; line < lines; ++line) {
        long rem = line, origin = 0;
        for (int kk = d - 1; kk >= 0; --kk) {
          if (kk == k) continue;
          origin += (rem % dims[kk]) * stride[kk];
          rem /= dims[kk];
        }
        for (long pos = 0; pos < dim; ++pos) {
          const float v = grid[static_cast<std::size_t>(origin + pos * str)];
          if (v == 0.0f) continue;
          const long m0 = std::max(-radius, -pos), m1 = std::min(radius, dim - 1 - pos);
          for (long m = m0; m <= m1; ++m)
            tmp[static_cast<std::size_t>(origin + (pos + m) * str)] +=
                v * taps[static_cast<std::size_t>(m + radius)];
        }
      }
      grid.swap(tmp);
    }

    for (Eigen::Index i = 0; i < n; ++i) {
      float acc = 0;
      for (int corner = 0; corner < corners; ++corner) {
        float wgt = 1.0f;
        long at = 0;
        for (int k = 0, digits = corner; k < d; ++k, digits /= 3) {
          const int a = digits % 3;
          wgt *= weight(3 * k + a, i);
          at += (center(k, i) + a - 1) * stride[k];
        }
        acc += wgt * grid[static_cast<std::size_t>(at)];
      }
      out(ch, i) = acc - self_coeff[i] * q(ch, i);
    }
  }
  return out;
}

enum class CrfEngine { exact, fast, automatic };

namespace detail {

struct KernelSet {
  std::vector<MatX<float>> features;
  std::vector<double> weights;
};

inline KernelSet build_kernels(const ImageF& img, const PlaneF* depth, const CrfParams& p) {
  KernelSet ks;
  if (p.w1 > 0) {
    ks.features.push_back(appearance_features(img, p.theta_alpha, p.theta_beta));
    ks.weights.push_back(p.w1);
  }
  if (p.w2 > 0 && depth) {
    ks.features.push_back(depth_features(*depth, p.theta_alpha, p.theta_gamma));
    ks.weights.push_back(p.w2);
  }
  if (p.w3 > 0) {
    ks.features.push_back(position_features(img.height(), img.width(), p.theta_alpha));
    ks.weights.push_back(p.w3);
  }
  return ks;
}

inline void softmax_columns(const MatX<float>& logits, MatX<float>& q) {
  q.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const float mx = logits.col(i).maxCoeff();
    VecX<float> e = (logits.col(i).array() - mx).exp().matrix();
    q.col(i) = e / e.sum();
  }
}

inline LabelPlane argmax_labels(const MatX<float>& q, int h, int w) {
  LabelPlane lp(h, w);
  Eigen::Index i = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x, ++i) {
      Eigen::Index best;
      q.col(i).maxCoeff(&best);
      lp(y, x) = static_cast<int>(best);
    }
  return lp;
}

}  // namespace detail

/// Synchronous mean-field refinement with Potts compatibility. `depth` may be
/// null (the depth kernel is then dropped). iterations == 0 returns the
/// (re)normalized unary softmax.
inline CrfResult mean_field_refine(const UnaryField& unary, const ImageF& img,
                                   const PlaneF* depth, const CrfParams& params,
                                   CrfEngine engine = CrfEngine::automatic) {
  params.validate();
  const Eigen::Index n = unary.pixels();
  require(img.channels() == 3, "crf expects an RGB image");
  require(img.height() == unary.h && img.width() == unary.w, "crf: image/unary shape mismatch");
  if (depth)
    require(depth->rows() == unary.h && depth->cols() == unary.w,
            "crf: depth/unary shape mismatch");
  require(unary.classes() >= 2, "crf needs at least 2 classes");

  const bool exact = engine == CrfEngine::exact ||
                     (engine == CrfEngine::automatic && n <= 1024);
  detail::KernelSet ks = detail::build_kernels(img, depth, params);

  CrfResult res;
  detail::softmax_columns(-unary.nlog, res.q);
  for (int it = 0; it < params.iterations; ++it) {
    MatX<float> combined = MatX<float>::Zero(unary.classes(), n);
    for (std::size_t k = 0; k < ks.features.size(); ++k) {
      MatX<float> msg = exact ? exact_message_pass(res.q, ks.features[k])
                              : fast_message_pass(res.q, ks.features[k]);
      combined += static_cast<float>(ks.weights[k]) * msg;
    }
    // Potts: pairwise(c,i) = sum over the other classes of the message
    VecX<float> col_total = combined.colwise().sum();
    MatX<float> pairwise = (-combined).rowwise() + col_total.transpose();
    detail::softmax_columns(-unary.nlog - pairwise, res.q);
  }
  res.labels = detail::argmax_labels(res.q, unary.h, unary.w);
  return res;
}

/// Exact Gibbs energy of a labeling: unary plus Potts-weighted pairwise over
/// unordered pairs. Quadratic; refuses instances beyond 64x64.
inline double gibbs_energy(const LabelPlane& labels, const UnaryField& unary, const ImageF& img,
                           const PlaneF* depth, const CrfParams& params) {
  params.validate();
  const int h = unary.h, w = unary.w;
  require(labels.rows() == h && labels.cols() == w, "energy: label shape mismatch");
  require(static_cast<long>(h) * w <= 4096, "energy audit capped at 64x64");
  require(img.height() == h && img.width() == w, "energy: image shape mismatch");

  double e = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int c = labels(y, x);
      require(c >= 0 && c < unary.classes(), "energy: label out of range");
      e += unary.nlog(c, static_cast<Eigen::Index>(y) * w + x);
    }

  const bool has_depth = depth != nullptr;
  float rgb_i[3], rgb_j[3];
  for (int yi = 0; yi < h; ++yi)
    for (int xi = 0; xi < w; ++xi) {
      for (int c = 0; c < 3; ++c) rgb_i[c] = img.planes[c](yi, xi);
      const float di = has_depth ? (*depth)(yi, xi) : 0.0f;
      // unordered pairs: scan strictly after (yi, xi)
      for (int yj = yi; yj < h; ++yj)
        for (int xj = (yj == yi ? xi + 1 : 0); xj < w; ++xj) {
          if (labels(yi, xi) == labels(yj, xj)) continue;
          for (int c = 0; c < 3; ++c) rgb_j[c] = img.planes[c](yj, xj);
          const float dj = has_depth ? (*depth)(yj, xj) : 0.0f;
          e += pairwise_kernel(yi, xi, yj, xj, rgb_i, rgb_j, di, dj, has_depth, params);
        }
    }
  return e;
}

}  // namespace fundus::crf
