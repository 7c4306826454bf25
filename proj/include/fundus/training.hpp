#pragma once

#include "fundus/data_pipeline.hpp"
#include "fundus/losses.hpp"
#include "fundus/networks.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace fundus::nn {

enum class LossKind { l2, l1, berhu, ce };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::l2: return "l2";
    case LossKind::l1: return "l1";
    case LossKind::berhu: return "berhu";
    case LossKind::ce: return "ce";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "l2") return LossKind::l2;
  if (s == "l1") return LossKind::l1;
  if (s == "berhu") return LossKind::berhu;
  if (s == "ce") return LossKind::ce;
  fail("unknown loss kind: " + s);
}

template <typename S>
Var<S> regression_loss(LossKind kind, Var<S> pred, const Tensor<S>& gt) {
  switch (kind) {
    case LossKind::l2: return l2_loss(pred, gt);
    case LossKind::l1: return l1_loss(pred, gt);
    case LossKind::berhu: return berhu_loss(pred, gt);
    case LossKind::ce: fail("cross-entropy is not a regression loss");
  }
  fail("unreachable");
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive moment estimation with bias correction. State is addressed by
/// parameter name so it survives checkpointing.
template <typename S>
class Adam {
 public:
  Adam() = default;
  Adam(S lr, S beta1, S beta2, S eps = S(1e-8))
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore<S>& ps) {
    if (slots_.size() != ps.entries().size()) slots_.resize(ps.entries().size());
    ++t_;
    const S corr1 = S(1) - std::pow(b1_, static_cast<S>(t_));
    const S corr2 = S(1) - std::pow(b2_, static_cast<S>(t_));
    for (std::size_t i = 0; i < ps.entries().size(); ++i) {
      auto& e = ps.entries()[i];
      if (!e.trainable || e.var.grad().size() == 0) continue;
      auto& slot = slots_[i];
      const MatX<S>& g = e.var.grad().m;
      if (slot.m.size() == 0) {
        slot.m.setZero(g.rows(), g.cols());
        slot.v.setZero(g.rows(), g.cols());
      }
      slot.m = b1_ * slot.m + (S(1) - b1_) * g;
      slot.v = b2_ * slot.v.array() + (S(1) - b2_) * g.array().square();
      e.var.val_mut().m.array() -=
          lr_ * (slot.m.array() / corr1) /
          ((slot.v.array() / corr2).sqrt() + eps_);
    }
  }

  long step_count() const { return t_; }

  void save(const ParamStore<S>& ps, CheckpointFile& ckpt) const {
    ckpt.meta["adam_t"] = t_;
    for (std::size_t i = 0; i < slots_.size() && i < ps.entries().size(); ++i) {
      if (slots_[i].m.size() == 0) continue;
      const std::string& name = ps.entries()[i].name;
      TensorF m(1, static_cast<int>(slots_[i].m.rows()), 1,
                static_cast<int>(slots_[i].m.cols()));
      m.m = slots_[i].m.template cast<float>();
      TensorF v = m;
      v.m = slots_[i].v.template cast<float>();
      ckpt.tensors.emplace_back("adam.m." + name, std::move(m));
      ckpt.tensors.emplace_back("adam.v." + name, std::move(v));
    }
  }

  void load(const ParamStore<S>& ps, const CheckpointFile& ckpt) {
    t_ = ckpt.meta.value("adam_t", 0L);
    slots_.assign(ps.entries().size(), {});
    for (std::size_t i = 0; i < ps.entries().size(); ++i) {
      const TensorF* m = ckpt.find("adam.m." + ps.entries()[i].name);
      const TensorF* v = ckpt.find("adam.v." + ps.entries()[i].name);
      if (!m || !v) continue;
      slots_[i].m = m->m.template cast<S>();
      slots_[i].v = v->m.template cast<S>();
    }
  }

 private:
  struct Slot {
    MatX<S> m, v;
  };
  std::vector<Slot> slots_;
  long t_ = 0;
  S lr_ = S(2e-4), b1_ = S(0.5), b2_ = S(0.999), eps_ = S(1e-8);
};

// ---------------------------------------------------------------------------
// Tensor conversion helpers
// ---------------------------------------------------------------------------

inline TensorF image_tensor(const ImageF& img) {
  return TensorF::from_planes(img.planes);
}

inline TensorF plane_tensor(const PlaneF& p) {
  return TensorF::from_planes({p});
}

/// Flatten labels in tensor column order ((y*w + x) for a single sample).
inline Labels labels_vector(const LabelPlane& lp) {
  Labels out(lp.size());
  Eigen::Index k = 0;
  for (Eigen::Index y = 0; y < lp.rows(); ++y)
    for (Eigen::Index x = 0; x < lp.cols(); ++x) out[k++] = lp(y, x);
  return out;
}

inline Labels concat_labels(const std::vector<Labels>& parts) {
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p.size();
  Labels out(total);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.segment(at, p.size()) = p;
    at += p.size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 10;
  int epochs = 200;
  double lr = 2e-4;
  double beta1 = 0.5, beta2 = 0.999;
  std::uint64_t seed = 1;
  int patience = 20;     // early stop after this many epochs without val improvement
  LossKind loss = LossKind::l2;
  double noise_sigma = 0.0;  // added to inputs each step (denoising pretext)
  long max_steps = 0;        // 0 = no cap; tests cap by steps
  std::string out_dir;       // when set: trace.jsonl, best.ckpt, last.ckpt

  void validate() const {
    require(batch_size >= 1, "batch_size must be >= 1");
    require(epochs >= 1, "epochs must be >= 1");
    require(patience >= 1, "patience must be >= 1");
  }
};

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> val_history;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  long steps = 0;
  int epochs_run = 0;
};

namespace detail {

/// Shared epoch/step/validation/checkpoint skeleton. `forward_loss` builds
/// the graph for one batch (training ctx supplied); `validate` returns a
/// lower-is-better metric in eval mode; `snapshot` fills a checkpoint with
/// model tensors and metadata.
struct LoopHooks {
  std::function<Var<float>(const std::vector<int>&, std::mt19937_64&)> forward_loss;
  std::function<double()> validate;
  std::function<void(CheckpointFile&)> snapshot;
};

inline void run_loop(ParamStore<float>& params, Adam<float>& adam, int n_train,
                     const TrainConfig& cfg, const LoopHooks& hooks, TrainResult& result,
                     long start_step = 0, int start_epoch = 0) {
  cfg.validate();
  require(n_train >= 1, "no training samples");
  std::ofstream trace;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    trace.open(cfg.out_dir + "/trace.jsonl", start_step == 0 ? std::ios::trunc : std::ios::app);
  }

  long step = start_step;
  bool stop = false;
  for (int epoch = start_epoch; epoch < cfg.epochs && !stop; ++epoch) {
    std::vector<int> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0xE90C, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (int at = 0; at < n_train && !stop; at += cfg.batch_size) {
      const int take = std::min(cfg.batch_size, n_train - at);
      std::vector<int> batch(order.begin() + at, order.begin() + at + take);
      std::mt19937_64 step_rng(mix_seed(cfg.seed, 0x57E9, step));
      params.zero_grads();
      Var<float> loss = hooks.forward_loss(batch, step_rng);
      loss.backward();
      adam.step(params);
      const double loss_val = loss.val().item();
      result.step_losses.push_back(loss_val);
      ++step;
      if (trace.is_open()) {
        nlohmann::json rec{{"epoch", epoch}, {"step", step}, {"loss", loss_val}};
        trace << rec.dump() << "\n";
      }
      if (cfg.max_steps > 0 && step >= cfg.max_steps) stop = true;
    }

    const double val = hooks.validate ? hooks.validate() : result.step_losses.back();
    const bool has_val = std::isfinite(val);
    result.val_history.push_back(val);
    result.epochs_run = epoch + 1;
    if (trace.is_open()) {
      nlohmann::json rec{{"epoch", epoch}, {"val", val}};
      trace << rec.dump() << "\n";
      trace.flush();
    }

    const bool improved = has_val && val < result.best_val;
    if (improved) {
      result.best_val = val;
      result.best_epoch = epoch;
    }
    if (!cfg.out_dir.empty() && hooks.snapshot) {
      CheckpointFile ckpt;
      ckpt.meta["epoch"] = epoch;
      ckpt.meta["step"] = step;
      ckpt.meta["val"] = val;
      ckpt.meta["best_val"] = result.best_val;
      ckpt.meta["best_epoch"] = result.best_epoch;
      hooks.snapshot(ckpt);
      adam.save(params, ckpt);
      save_checkpoint(cfg.out_dir + "/last.ckpt", ckpt);
      if (improved) save_checkpoint(cfg.out_dir + "/best.ckpt", ckpt);
    }
    if (has_val && epoch - result.best_epoch > cfg.patience) stop = true;
  }
  result.steps = step;
}

inline void add_input_noise(TensorF& x, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0) return;
  std::normal_distribution<double> d(0.0, sigma);
  for (Eigen::Index j = 0; j < x.m.cols(); ++j)
    for (Eigen::Index i = 0; i < x.m.rows(); ++i)
      x.m(i, j) += static_cast<float>(d(rng));
}

}  // namespace detail

/// Input/target pair with tensors prepared up front (reconstruction, pseudo-
/// depth, and depth-regression training all use this shape).
struct SupervisedPair {
  TensorF input;
  TensorF target;
};

inline double rmse_of(const TensorF& a, const TensorF& b) {
  return std::sqrt((a.m - b.m).squaredNorm() / static_cast<double>(a.size()));
}

/// Trains an encoder-decoder on (input, target) tensor pairs. Validation
/// metric is RMSE. Deterministic given cfg.seed; supports resuming.
inline TrainResult train_reconstruction(DepthNet<float>& net,
                                        const std::vector<SupervisedPair>& train,
                                        const std::vector<SupervisedPair>& val,
                                        const TrainConfig& cfg, long start_step = 0,
                                        int start_epoch = 0, Adam<float>* resume_adam = nullptr) {
  require(!train.empty(), "train set is empty");
  Adam<float> local(static_cast<float>(cfg.lr), static_cast<float>(cfg.beta1),
                    static_cast<float>(cfg.beta2));
  Adam<float>& adam = resume_adam ? *resume_adam : local;

  detail::LoopHooks hooks;
  hooks.forward_loss = [&](const std::vector<int>& batch, std::mt19937_64& rng) {
    std::vector<TensorF> xs, ys;
    for (int i : batch) {
      xs.push_back(train[i].input);
      ys.push_back(train[i].target);
    }
    TensorF x = batch_stack(xs), y = batch_stack(ys);
    detail::add_input_noise(x, cfg.noise_sigma, rng);
    Ctx ctx{true, &rng};
    return regression_loss(cfg.loss, net.forward(Var<float>::leaf(x, false), ctx), y);
  };
  hooks.validate = [&]() -> double {
    if (val.empty()) return std::numeric_limits<double>::infinity();
    Ctx ctx{false, nullptr};
    double se = 0;
    long n = 0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      TensorF x = val[i].input;
      if (cfg.noise_sigma > 0) {
        std::mt19937_64 rng(mix_seed(cfg.seed, 0x7A1, i));
        detail::add_input_noise(x, cfg.noise_sigma, rng);
      }
      auto pred = net.forward(Var<float>::leaf(x, false), ctx);
      se += (pred.val().m - val[i].target.m).squaredNorm();
      n += val[i].target.size();
    }
    return std::sqrt(se / static_cast<double>(n));
  };
  hooks.snapshot = [&](CheckpointFile& ckpt) {
    ckpt.meta["kind"] = "reconstruction";
    ckpt.meta["loss"] = to_string(cfg.loss);
    store_params(net.params(), ckpt);
  };

  TrainResult result;
  detail::run_loop(net.params(), adam, static_cast<int>(train.size()), cfg, hooks, result,
                   start_step, start_epoch);
  return result;
}

/// One segmentation sample: image tensor, optional guide tensor, labels.
struct SegSample {
  TensorF image;
  TensorF guide;  // empty (size 0) when the model is unguided
  Labels labels;
};

namespace detail {

template <typename Model>
Var<float> seg_forward(const Model& net, const TensorF& image, const TensorF& guide,
                       const Ctx& ctx);

template <>
inline Var<float> seg_forward<DepthNet<float>>(const DepthNet<float>& net, const TensorF& image,
                                               const TensorF& /*guide*/, const Ctx& ctx) {
  return net.forward_raw(Var<float>::leaf(image, false), ctx);
}

template <>
inline Var<float> seg_forward<GuidedSegNet<float>>(const GuidedSegNet<float>& net,
                                                   const TensorF& image, const TensorF& guide,
                                                   const Ctx& ctx) {
  return net.forward_raw(Var<float>::leaf(image, false), Var<float>::leaf(guide, false), ctx);
}

}  // namespace detail

/// Trains a (guided or plain) segmentation network with softmax cross-
/// entropy. Validation metric is mean CE on the val set.
template <typename Model>
TrainResult train_segmentation(Model& net, const std::vector<SegSample>& train,
                               const std::vector<SegSample>& val, const TrainConfig& cfg,
                               long start_step = 0, int start_epoch = 0,
                               Adam<float>* resume_adam = nullptr) {
  require(!train.empty(), "train set is empty");
  Adam<float> local(static_cast<float>(cfg.lr), static_cast<float>(cfg.beta1),
                    static_cast<float>(cfg.beta2));
  Adam<float>& adam = resume_adam ? *resume_adam : local;

  detail::LoopHooks hooks;
  hooks.forward_loss = [&](const std::vector<int>& batch, std::mt19937_64& rng) {
    std::vector<TensorF> xs, gs;
    std::vector<Labels> ls;
    for (int i : batch) {
      xs.push_back(train[i].image);
      if (train[i].guide.size() > 0) gs.push_back(train[i].guide);
      ls.push_back(train[i].labels);
    }
    TensorF x = batch_stack(xs);
    TensorF g = gs.empty() ? TensorF() : batch_stack(gs);
    Ctx ctx{true, &rng};
    Var<float> logits = detail::seg_forward(net, x, g, ctx);
    return softmax_cross_entropy(logits, concat_labels(ls));
  };
  hooks.validate = [&]() -> double {
    if (val.empty()) return std::numeric_limits<double>::infinity();
    Ctx ctx{false, nullptr};
    double total = 0;
    long n = 0;
    for (const auto& s : val) {
      Var<float> logits = detail::seg_forward(net, s.image, s.guide, ctx);
      TensorF prob = logits.val();
      for (Eigen::Index j = 0; j < prob.m.cols(); ++j) {
        Eigen::Index y = s.labels[j];
        float mx = prob.m.col(j).maxCoeff();
        double z = (prob.m.col(j).array() - mx).exp().sum();
        total += std::log(z) - (prob.m(y, j) - mx);
      }
      n += prob.pixels();
    }
    return total / static_cast<double>(n);
  };
  hooks.snapshot = [&](CheckpointFile& ckpt) {
    ckpt.meta["kind"] = "segmentation";
    store_params(net.params(), ckpt);
  };

  TrainResult result;
  detail::run_loop(net.params(), adam, static_cast<int>(train.size()), cfg, hooks, result,
                   start_step, start_epoch);
  return result;
}

}  // namespace fundus::nn
