#pragma once

#include "fundus/autodiff.hpp"

#include <cmath>

namespace fundus::nn {

/// Per-pixel class indices aligned with tensor columns ((b*h + y)*w + x).
using Labels = Eigen::ArrayXi;

// ---------------------------------------------------------------------------
// Plain (non-autodiff) loss evaluations
// ---------------------------------------------------------------------------

/// Euclidean norm of the elementwise difference.
template <typename S>
S loss_l2(const Tensor<S>& pred, const Tensor<S>& gt) {
  require(pred.same_shape(gt), "loss_l2: shape mismatch");
  return (pred.m - gt.m).norm();
}

template <typename S>
S loss_l1(const Tensor<S>& pred, const Tensor<S>& gt) {
  require(pred.same_shape(gt), "loss_l1: shape mismatch");
  return (pred.m - gt.m).template lpNorm<1>();
}

/// Per-batch berHu threshold: 20% of the maximal absolute residual.
template <typename S>
S berhu_threshold(const Tensor<S>& pred, const Tensor<S>& gt) {
  require(pred.same_shape(gt), "berhu: shape mismatch");
  require(pred.size() > 0, "berhu: empty batch");
  return S(0.2) * (pred.m - gt.m).array().abs().maxCoeff();
}

/// Reverse Huber with a fixed threshold c: |x| below c, (x^2+c^2)/(2c) above,
/// summed over all elements. c == 0 degenerates to plain L1.
template <typename S>
S loss_berhu_fixed(const Tensor<S>& pred, const Tensor<S>& gt, S c) {
  require(pred.same_shape(gt), "berhu: shape mismatch");
  if (c <= S(0)) return loss_l1(pred, gt);
  auto r = (pred.m - gt.m).array();
  auto a = r.abs();
  return ((a <= c).select(a, (r.square() + c * c) / (S(2) * c))).sum();
}

template <typename S>
S loss_berhu(const Tensor<S>& pred, const Tensor<S>& gt) {
  return loss_berhu_fixed(pred, gt, berhu_threshold(pred, gt));
}

/// Mean negative log-likelihood of the true class, from probabilities.
template <typename S>
S loss_multiclass_ce(const Tensor<S>& prob, const Labels& labels) {
  require(labels.size() == prob.pixels(), "ce: label count mismatch");
  S total = 0;
  for (Eigen::Index j = 0; j < prob.m.cols(); ++j) {
    int y = labels[j];
    require(y >= 0 && y < prob.c, "ce: label out of range at pixel " + std::to_string(j));
    total -= std::log(std::max(prob.m(y, j), S(1e-12)));
  }
  return total / static_cast<S>(prob.pixels());
}

// ---------------------------------------------------------------------------
// Autodiff loss ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> l2_loss(Var<S> pred, const Tensor<S>& gt) {
  require(pred.val().same_shape(gt), "l2_loss: shape mismatch");
  Tensor<S> diff = pred.val();
  diff.m -= gt.m;
  S norm = diff.m.norm();
  return detail::make_op<S>(Tensor<S>::scalar(norm), {pred}, [diff, norm](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = diff;
    g.m *= (norm > S(0) ? v.grad.item() / norm : S(0));
    v.parents[0]->accumulate(g);
  });
}

template <typename S>
Var<S> l1_loss(Var<S> pred, const Tensor<S>& gt) {
  require(pred.val().same_shape(gt), "l1_loss: shape mismatch");
  Tensor<S> diff = pred.val();
  diff.m -= gt.m;
  S total = diff.m.template lpNorm<1>();
  return detail::make_op<S>(Tensor<S>::scalar(total), {pred}, [diff](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = diff;
    g.m = diff.m.array().sign() * v.grad.item();
    v.parents[0]->accumulate(g);
  });
}

template <typename S>
Var<S> berhu_loss_fixed(Var<S> pred, const Tensor<S>& gt, S c) {
  if (c <= S(0)) return l1_loss(pred, gt);
  Tensor<S> diff = pred.val();
  diff.m -= gt.m;
  S total = loss_berhu_fixed(pred.val(), gt, c);
  return detail::make_op<S>(Tensor<S>::scalar(total), {pred}, [diff, c](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = diff;
    auto r = diff.m.array();
    g.m = (r.abs() <= c).select(r.sign(), r / c) * v.grad.item();
    v.parents[0]->accumulate(g);
  });
}

/// berHu with c computed from the current batch and treated as a constant.
template <typename S>
Var<S> berhu_loss(Var<S> pred, const Tensor<S>& gt) {
  S c = berhu_threshold(pred.val(), gt);
  return berhu_loss_fixed(pred, gt, c);
}

/// Numerically stable softmax + mean cross-entropy from logits.
/// Gradient w.r.t. logits is (softmax - onehot) / pixel_count.
template <typename S>
Var<S> softmax_cross_entropy(Var<S> logits, const Labels& labels) {
  const Tensor<S>& x = logits.val();
  require(labels.size() == x.pixels(), "softmax_ce: label count mismatch");
  Tensor<S> soft = x;
  S total = 0;
  for (Eigen::Index j = 0; j < x.m.cols(); ++j) {
    int y = labels[j];
    require(y >= 0 && y < x.c, "softmax_ce: label out of range");
    S mx = x.m.col(j).maxCoeff();
    VecX<S> e = (x.m.col(j).array() - mx).exp();
    S z = e.sum();
    soft.m.col(j) = e / z;
    total += std::log(z) - (x.m(y, j) - mx);
  }
  const S inv_n = S(1) / static_cast<S>(x.pixels());
  total *= inv_n;
  Labels lab = labels;
  return detail::make_op<S>(Tensor<S>::scalar(total), {logits},
                            [soft, lab, inv_n](VarNode<S>& v) {
    if (!v.parents[0]->requires_grad) return;
    Tensor<S> g = soft;
    for (Eigen::Index j = 0; j < g.m.cols(); ++j) g.m(lab[j], j) -= S(1);
    g.m *= inv_n * v.grad.item();
    v.parents[0]->accumulate(g);
  });
}

}  // namespace fundus::nn
