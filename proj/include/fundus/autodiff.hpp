#pragma once

#include "fundus/tensor.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fundus::nn {

using fundus::Tensor;

template <typename S>
struct VarNode {
  Tensor<S> val;
  Tensor<S> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<VarNode>> parents;
  std::function<void(VarNode&)> backward_fn;  // scatters this->grad into parents

  void accumulate(const Tensor<S>& g) {
    if (grad.size() == 0) {
      grad = Tensor<S>(val.n, val.c, val.h, val.w);
    }
    grad.m += g.m;
  }
};

/// Handle to a tape node. Ops build the graph; backward() walks it in reverse
/// topological order.
template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<VarNode<S>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<S> t, bool requires_grad) {
    auto n = std::make_shared<VarNode<S>>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool valid() const { return node_ != nullptr; }
  const Tensor<S>& val() const { return node_->val; }
  // Handle semantics: a const Var still designates a mutable node.
  Tensor<S>& val_mut() const { return node_->val; }
  const Tensor<S>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  std::shared_ptr<VarNode<S>> node() const { return node_; }

  void zero_grad() { node_->grad = Tensor<S>(); }

  /// Reverse-mode sweep from a scalar output.
  void backward() {
    require(node_->val.size() == 1, "backward: output must be scalar");
    node_->grad = Tensor<S>::scalar(static_cast<S>(1));
    std::vector<VarNode<S>*> order;
    std::unordered_set<VarNode<S>*> seen;
    topo(node_.get(), seen, order);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      VarNode<S>* v = *it;
      if (v->backward_fn && v->grad.size() != 0) v->backward_fn(*v);
    }
  }

 private:
  static void topo(VarNode<S>* v, std::unordered_set<VarNode<S>*>& seen,
                   std::vector<VarNode<S>*>& order) {
    // Iterative DFS; graphs here can be a few thousand nodes deep.
    struct Frame {
      VarNode<S>* v;
      size_t next = 0;
    };
    std::vector<Frame> stack{{v, 0}};
    seen.insert(v);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.v->parents.size()) {
        VarNode<S>* p = f.v->parents[f.next++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.v);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<VarNode<S>> node_;
};

namespace detail {

template <typename S>
Var<S> make_op(Tensor<S> out, std::vector<Var<S>> parents,
               std::function<void(VarNode<S>&)> fn) {
  auto n = std::make_shared<VarNode<S>>();
  n->val = std::move(out);
  for (auto& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) n->backward_fn = std::move(fn);
  return Var<S>(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require(a.val().same_shape(b.val()), "add: shape mismatch");
  Tensor<S> out = a.val();
  out.m += b.val().m;
  return detail::make_op<S>(std::move(out), {a, b}, [](VarNode<S>& v) {
    if (v.parents[0]->requires_grad) v.parents[0]->accumulate(v.grad);
    if (v.parents[1]->requires_grad) v.parents[1]->accumulate(v.grad);
  });
}

template <typename S>
Var<S> affine(Var<S> x, S scale, S shift) {
  Tensor<S> out = x.val();
  out.m = out.m.array() * scale + shift;
  return detail::make_op<S>(std::move(out), {x}, [scale](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = v.grad;
    g.m *= scale;
    v.parents[0]->accumulate(g);
  });
}

template <typename S>
Var<S> leaky_relu(Var<S> x, S slope) {
  Tensor<S> out = x.val();
  out.m = out.m.array().max(out.m.array() * slope);
  auto xn = x.node();
  return detail::make_op<S>(std::move(out), {x}, [xn, slope](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = v.grad;
    g.m.array() *= (xn->val.m.array() > S(0)).template cast<S>() * (S(1) - slope) + slope;
    v.parents[0]->accumulate(g);
  });
}

template <typename S>
Var<S> relu(Var<S> x) {
  return leaky_relu<S>(x, S(0));
}

template <typename S>
Var<S> tanh_act(Var<S> x) {
  Tensor<S> out = x.val();
  out.m = out.m.array().tanh();
  Tensor<S> y = out;
  return detail::make_op<S>(std::move(out), {x}, [y](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = v.grad;
    g.m.array() *= (S(1) - y.m.array().square());
    v.parents[0]->accumulate(g);
  });
}

/// Per-pixel softmax across channels (each column is one pixel).
template <typename S>
Var<S> softmax_channels(Var<S> x) {
  Tensor<S> out = x.val();
  for (Eigen::Index j = 0; j < out.m.cols(); ++j) {
    auto col = out.m.col(j).array();
    S mx = col.maxCoeff();
    out.m.col(j) = (col - mx).exp();
    out.m.col(j) /= out.m.col(j).sum();
  }
  Tensor<S> y = out;
  return detail::make_op<S>(std::move(out), {x}, [y](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = v.grad;
    for (Eigen::Index j = 0; j < g.m.cols(); ++j) {
      S dot = g.m.col(j).dot(y.m.col(j));
      g.m.col(j) = y.m.col(j).array() * (g.m.col(j).array() - dot);
    }
    v.parents[0]->accumulate(g);
  });
}

template <typename S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
  const Tensor<S>&ta = a.val(), &tb = b.val();
  require(ta.n == tb.n && ta.h == tb.h && ta.w == tb.w, "concat: spatial/batch mismatch");
  Tensor<S> out(ta.n, ta.c + tb.c, ta.h, ta.w);
  out.m.topRows(ta.c) = ta.m;
  out.m.bottomRows(tb.c) = tb.m;
  int ca = ta.c, cb = tb.c;
  return detail::make_op<S>(std::move(out), {a, b}, [ca, cb](VarNode<S>& v) {
    if (v.parents[0]->requires_grad) {
      Tensor<S> g(v.grad.n, ca, v.grad.h, v.grad.w);
      g.m = v.grad.m.topRows(ca);
      v.parents[0]->accumulate(g);
    }
    if (v.parents[1]->requires_grad) {
      Tensor<S> g(v.grad.n, cb, v.grad.h, v.grad.w);
      g.m = v.grad.m.bottomRows(cb);
      v.parents[1]->accumulate(g);
    }
  });
}

/// Inverted dropout; identity when `training` is false or rate == 0.
template <typename S>
Var<S> dropout(Var<S> x, S rate, bool training, std::mt19937_64& rng) {
  if (!training || rate <= S(0)) return x;
  require(rate < S(1), "dropout: rate must be < 1");
  Tensor<S> mask(x.val().n, x.val().c, x.val().h, x.val().w);
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  S inv_keep = S(1) / (S(1) - rate);
  for (Eigen::Index j = 0; j < mask.m.cols(); ++j)
    for (Eigen::Index i = 0; i < mask.m.rows(); ++i)
      mask.m(i, j) = keep(rng) ? inv_keep : S(0);
  Tensor<S> out = x.val();
  out.m.array() *= mask.m.array();
  return detail::make_op<S>(std::move(out), {x}, [mask](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = v.grad;
    g.m.array() *= mask.m.array();
    v.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Convolutions (im2col + GEMM, per-sample to bound the scratch buffer)
// ---------------------------------------------------------------------------

struct ConvSpec {
  int kh = 3, kw = 3;
  int stride = 1;
  int dilation = 1;
};

struct ConvGeom {
  int out_h, out_w;
  int pad_top, pad_left;
};

/// TF-style "same" geometry: out = ceil(in / stride).
inline ConvGeom conv_geometry(int h, int w, const ConvSpec& s) {
  auto one = [&](int n, int k) {
    int out = (n + s.stride - 1) / s.stride;
    int eff_k = (k - 1) * s.dilation + 1;
    int total = std::max((out - 1) * s.stride + eff_k - n, 0);
    return std::pair<int, int>{out, total / 2};
  };
  auto [oh, pt] = one(h, s.kh);
  auto [ow, pl] = one(w, s.kw);
  return {oh, ow, pt, pl};
}

namespace detail {

/// Gather im2col patches for one sample: rows = c*kh*kw grouped as
/// (ky,kx)-major with the channel vector contiguous, cols = out_h*out_w.
template <typename S>
void im2col(const Tensor<S>& x, int b, const ConvSpec& s, const ConvGeom& g, MatX<S>& cols) {
  const int c = x.c;
  cols.setZero(static_cast<Eigen::Index>(c) * s.kh * s.kw, static_cast<Eigen::Index>(g.out_h) * g.out_w);
  for (int ky = 0; ky < s.kh; ++ky) {
    for (int kx = 0; kx < s.kw; ++kx) {
      const Eigen::Index r0 = (static_cast<Eigen::Index>(ky) * s.kw + kx) * c;
      for (int oy = 0; oy < g.out_h; ++oy) {
        const int iy = oy * s.stride - g.pad_top + ky * s.dilation;
        if (iy < 0 || iy >= x.h) continue;
        for (int ox = 0; ox < g.out_w; ++ox) {
          const int ix = ox * s.stride - g.pad_left + kx * s.dilation;
          if (ix < 0 || ix >= x.w) continue;
          cols.col(static_cast<Eigen::Index>(oy) * g.out_w + ox).segment(r0, c) =
              x.m.col(x.col(b, iy, ix));
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add patch-gradient columns back onto the input.
template <typename S>
void col2im_add(const MatX<S>& cols, int b, const ConvSpec& s, const ConvGeom& g, Tensor<S>& dx) {
  const int c = dx.c;
  for (int ky = 0; ky < s.kh; ++ky) {
    for (int kx = 0; kx < s.kw; ++kx) {
      const Eigen::Index r0 = (static_cast<Eigen::Index>(ky) * s.kw + kx) * c;
      for (int oy = 0; oy < g.out_h; ++oy) {
        const int iy = oy * s.stride - g.pad_top + ky * s.dilation;
        if (iy < 0 || iy >= dx.h) continue;
        for (int ox = 0; ox < g.out_w; ++ox) {
          const int ix = ox * s.stride - g.pad_left + kx * s.dilation;
          if (ix < 0 || ix >= dx.w) continue;
          dx.m.col(dx.col(b, iy, ix)) +=
              cols.col(static_cast<Eigen::Index>(oy) * g.out_w + ox).segment(r0, c);
        }
      }
    }
  }
}

}  // namespace detail

/// 2D convolution with "same" zero padding. Weight tensor shape: (out_c) x
/// (in_c*kh*kw) laid out to match im2col rows; bias (out_c) x 1.
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> weight, Var<S> bias, const ConvSpec& spec) {
  const Tensor<S>& xt = x.val();
  const int in_c = xt.c;
  const int out_c = weight.val().c;
  require(weight.val().m.cols() == static_cast<Eigen::Index>(in_c) * spec.kh * spec.kw,
          "conv2d: weight shape does not match input channels " + std::to_string(in_c));
  ConvGeom g = conv_geometry(xt.h, xt.w, spec);
  Tensor<S> out(xt.n, out_c, g.out_h, g.out_w);
  MatX<S> cols;
  for (int b = 0; b < xt.n; ++b) {
    detail::im2col(xt, b, spec, g, cols);
    out.m.middleCols(static_cast<Eigen::Index>(b) * g.out_h * g.out_w,
                     static_cast<Eigen::Index>(g.out_h) * g.out_w).noalias() =
        weight.val().m * cols;
  }
  out.m.colwise() += bias.val().m.col(0);

  auto xn = x.node();
  auto wn = weight.node();
  return detail::make_op<S>(std::move(out), {x, weight, bias},
                            [xn, wn, spec, g](VarNode<S>& v) {
    const Tensor<S>& xt = xn->val;
    const Eigen::Index opix = static_cast<Eigen::Index>(g.out_h) * g.out_w;
    MatX<S> cols;
    Tensor<S> dx;
    bool need_dx = v.parents[0]->requires_grad;
    bool need_dw = v.parents[1]->requires_grad;
    if (need_dx) dx = Tensor<S>(xt.n, xt.c, xt.h, xt.w);
    MatX<S> dw;
    if (need_dw) dw.setZero(wn->val.m.rows(), wn->val.m.cols());
    for (int b = 0; b < xt.n; ++b) {
      auto dy = v.grad.m.middleCols(static_cast<Eigen::Index>(b) * opix, opix);
      if (need_dw) {
        detail::im2col(xt, b, spec, g, cols);
        dw.noalias() += dy * cols.transpose();
      }
      if (need_dx) {
        MatX<S> gcols = wn->val.m.transpose() * dy;
        detail::col2im_add(gcols, b, spec, g, dx);
      }
    }
    if (need_dx) v.parents[0]->accumulate(dx);
    if (need_dw) {
      Tensor<S> dwt = wn->val;
      dwt.m = dw;
      v.parents[1]->accumulate(dwt);
    }
    if (v.parents[2]->requires_grad) {
      Tensor<S> db(1, static_cast<int>(v.grad.m.rows()), 1, 1);
      db.m.col(0) = v.grad.m.rowwise().sum();
      v.parents[2]->accumulate(db);
    }
  });
}

/// Transposed convolution: exact adjoint of a stride-`s` conv from the output
/// grid back to the input grid. Doubles spatial dims for kh=kw=4, stride=2.
/// Weight shape: (in_c) x (out_c*kh*kw); bias (out_c) x 1.
template <typename S>
Var<S> conv_transpose2d(Var<S> x, Var<S> weight, Var<S> bias, const ConvSpec& spec) {
  const Tensor<S>& xt = x.val();
  const int out_h = xt.h * spec.stride;
  const int out_w = xt.w * spec.stride;
  const int out_c = static_cast<int>(weight.val().m.cols()) / (spec.kh * spec.kw);
  require(weight.val().c == xt.c, "conv_transpose2d: weight/channel mismatch");
  // Geometry of the forward conv this op is the adjoint of.
  ConvGeom g = conv_geometry(out_h, out_w, spec);
  require(g.out_h == xt.h && g.out_w == xt.w, "conv_transpose2d: inconsistent geometry");

  Tensor<S> out(xt.n, out_c, out_h, out_w);
  const Eigen::Index ipix = static_cast<Eigen::Index>(xt.h) * xt.w;
  for (int b = 0; b < xt.n; ++b) {
    MatX<S> gcols = weight.val().m.transpose() *
                    xt.m.middleCols(static_cast<Eigen::Index>(b) * ipix, ipix);
    detail::col2im_add(gcols, b, spec, g, out);
  }
  out.m.colwise() += bias.val().m.col(0);

  auto xn = x.node();
  auto wn = weight.node();
  return detail::make_op<S>(std::move(out), {x, weight, bias},
                            [xn, wn, spec, g](VarNode<S>& v) {
    const Tensor<S>& xt = xn->val;
    const Eigen::Index ipix = static_cast<Eigen::Index>(xt.h) * xt.w;
    MatX<S> cols;
    bool need_dx = v.parents[0]->requires_grad;
    bool need_dw = v.parents[1]->requires_grad;
    Tensor<S> dx;
    if (need_dx) dx = Tensor<S>(xt.n, xt.c, xt.h, xt.w);
    MatX<S> dw;
    if (need_dw) dw.setZero(wn->val.m.rows(), wn->val.m.cols());
    for (int b = 0; b < xt.n; ++b) {
      detail::im2col(v.grad, b, spec, g, cols);  // patches of the upstream grad
      if (need_dx)
        dx.m.middleCols(static_cast<Eigen::Index>(b) * ipix, ipix).noalias() =
            wn->val.m * cols;
      if (need_dw)
        dw.noalias() += xt.m.middleCols(static_cast<Eigen::Index>(b) * ipix, ipix) *
                        cols.transpose();
    }
    if (need_dx) v.parents[0]->accumulate(dx);
    if (need_dw) {
      Tensor<S> dwt = wn->val;
      dwt.m = dw;
      v.parents[1]->accumulate(dwt);
    }
    if (v.parents[2]->requires_grad) {
      Tensor<S> db(1, static_cast<int>(v.grad.m.rows()), 1, 1);
      db.m.col(0) = v.grad.m.rowwise().sum();
      v.parents[2]->accumulate(db);
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Training mode uses per-batch statistics over all pixels of all samples and
/// updates the running buffers in place; eval mode reads the buffers.
template <typename S>
Var<S> batch_norm(Var<S> x, Var<S> gamma, Var<S> beta, Tensor<S>& running_mean,
                  Tensor<S>& running_var, bool training, S momentum = S(0.9),
                  S eps = S(1e-5)) {
  const Tensor<S>& xt = x.val();
  const Eigen::Index m_count = xt.m.cols();
  VecX<S> mean(xt.c), var(xt.c);
  if (training) {
    mean = xt.m.rowwise().mean();
    var = (xt.m.colwise() - mean).array().square().rowwise().mean();
    running_mean.m.col(0) = momentum * running_mean.m.col(0) + (S(1) - momentum) * mean;
    running_var.m.col(0) = momentum * running_var.m.col(0) + (S(1) - momentum) * var;
  } else {
    mean = running_mean.m.col(0);
    var = running_var.m.col(0);
  }
  VecX<S> inv_std = (var.array() + eps).rsqrt();
  Tensor<S> xhat = xt;
  xhat.m = ((xt.m.colwise() - mean).array().colwise() * inv_std.array()).matrix();
  Tensor<S> out = xhat;
  out.m = (out.m.array().colwise() * gamma.val().m.col(0).array()).matrix();
  out.m.colwise() += beta.val().m.col(0);

  auto xn = x.node();
  auto gn = gamma.node();
  return detail::make_op<S>(
      std::move(out), {x, gamma, beta},
      [xn, gn, xhat, inv_std, training, m_count](VarNode<S>& v) {
        const MatX<S>& dy = v.grad.m;
        if (v.parents[1]->requires_grad) {
          Tensor<S> dg(1, static_cast<int>(dy.rows()), 1, 1);
          dg.m.col(0) = (dy.array() * xhat.m.array()).rowwise().sum();
          v.parents[1]->accumulate(dg);
        }
        if (v.parents[2]->requires_grad) {
          Tensor<S> db(1, static_cast<int>(dy.rows()), 1, 1);
          db.m.col(0) = dy.rowwise().sum();
          v.parents[2]->accumulate(db);
        }
        if (!v.parents[0]->requires_grad) return;
        Tensor<S> dx = v.grad;
        MatX<S> dxhat = (dy.array().colwise() * gn->val.m.col(0).array()).matrix();
        if (!training) {
          dx.m = (dxhat.array().colwise() * inv_std.array()).matrix();
        } else {
          const S inv_m = S(1) / static_cast<S>(m_count);
          VecX<S> sum_dxhat = dxhat.rowwise().sum();
          VecX<S> sum_dxhat_xhat = (dxhat.array() * xhat.m.array()).rowwise().sum();
          // dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
          dx.m = (((dxhat * static_cast<S>(m_count)).colwise() - sum_dxhat).array() -
                  (xhat.m.array().colwise() * sum_dxhat_xhat.array()))
                     .colwise() *
                 (inv_std.array() * inv_m);
        }
        v.parents[0]->accumulate(dx);
      });
}

}  // namespace fundus::nn
