#pragma once

#include "fundus/autodiff.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace fundus::nn {

enum class BlockKind { conv, residual, dri };
enum class Act { leaky_relu, relu, none };

inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::conv: return "conv";
    case BlockKind::residual: return "residual";
    case BlockKind::dri: return "dri";
  }
  return "?";
}

inline BlockKind block_kind_from_string(const std::string& s) {
  if (s == "conv") return BlockKind::conv;
  if (s == "residual") return BlockKind::residual;
  if (s == "dri") return BlockKind::dri;
  fail("unknown block kind: " + s);
}

struct BlockConfig {
  BlockKind kind = BlockKind::residual;
  int in_channels = 0;
  int out_channels = 0;
  std::vector<int> dilation_rates;  // dri only; strictly increasing

  void validate() const {
    require(in_channels > 0 && out_channels > 0, "BlockConfig: channels must be positive");
    if (kind == BlockKind::dri) {
      require(!dilation_rates.empty(), "BlockConfig: dri needs dilation rates");
      for (size_t i = 1; i < dilation_rates.size(); ++i)
        require(dilation_rates[i] > dilation_rates[i - 1],
                "BlockConfig: dilation rates must be strictly increasing");
    }
  }
};

/// Forward-pass context: training toggles BN statistics and dropout; the RNG
/// drives dropout masks and is owned by the caller for determinism.
struct Ctx {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

template <typename S>
struct ParamEntry {
  std::string name;
  Var<S> var;
  bool trainable = true;  // false for BN running statistics
};

/// Flat name -> tensor registry shared by a whole model. Checkpoints and the
/// optimizer address parameters through it.
template <typename S>
class ParamStore {
 public:
  Var<S> add(const std::string& name, Tensor<S> init, bool trainable = true) {
    require(!index_.count(name), "duplicate parameter: " + name);
    Var<S> v = Var<S>::leaf(std::move(init), trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, v, trainable});
    return v;
  }

  const std::vector<ParamEntry<S>>& entries() const { return entries_; }
  std::vector<ParamEntry<S>>& entries() { return entries_; }

  Var<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].var;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += static_cast<std::size_t>(e.var.val().size());
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  /// Zero every tensor, including BN scale/shift. Used by identity tests.
  void zero_all_values() {
    for (auto& e : entries_) e.var.val_mut().m.setZero();
  }

 private:
  std::vector<ParamEntry<S>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename S>
Tensor<S> he_normal(int rows, int cols, Eigen::Index fan_in, std::mt19937_64& rng) {
  Tensor<S> t(1, rows, 1, cols);
  t.m.resize(rows, cols);
  t.fill_randn(rng, static_cast<S>(std::sqrt(2.0 / static_cast<double>(fan_in))));
  t.c = rows;
  t.h = 1;
  t.w = cols;
  t.n = 1;
  return t;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename S>
struct Conv2d {
  ConvSpec spec;
  int in_c = 0, out_c = 0;
  Var<S> W, b;

  Conv2d() = default;
  Conv2d(ParamStore<S>& ps, const std::string& name, int in_channels, int out_channels,
         int k, int stride, int dilation, std::mt19937_64& rng) {
    spec = {k, k, stride, dilation};
    in_c = in_channels;
    out_c = out_channels;
    const Eigen::Index fan_in = static_cast<Eigen::Index>(in_c) * k * k;
    W = ps.add(name + ".W", he_normal<S>(out_c, static_cast<int>(fan_in), fan_in, rng));
    b = ps.add(name + ".b", Tensor<S>(1, out_c, 1, 1));
  }

  Var<S> operator()(Var<S> x) const {
    require(x.val().c == in_c, "conv: expected " + std::to_string(in_c) +
                                   " input channels, got " + std::to_string(x.val().c));
    return conv2d(x, W, b, spec);
  }
};

template <typename S>
struct ConvTranspose2d {
  ConvSpec spec;
  int in_c = 0, out_c = 0;
  Var<S> W, b;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore<S>& ps, const std::string& name, int in_channels,
                  int out_channels, int k, int stride, std::mt19937_64& rng) {
    spec = {k, k, stride, 1};
    in_c = in_channels;
    out_c = out_channels;
    const Eigen::Index fan_in = static_cast<Eigen::Index>(in_c) * k * k / (stride * stride);
    W = ps.add(name + ".W",
               he_normal<S>(in_c, out_c * k * k, std::max<Eigen::Index>(fan_in, 1), rng));
    b = ps.add(name + ".b", Tensor<S>(1, out_c, 1, 1));
  }

  Var<S> operator()(Var<S> x) const {
    require(x.val().c == in_c, "deconv: channel mismatch");
    return conv_transpose2d(x, W, b, spec);
  }
};

template <typename S>
struct BatchNorm2d {
  Var<S> gamma, beta;
  Var<S> run_mean, run_var;  // buffers, requires_grad = false
  S momentum = S(0.9);
  S eps = S(1e-5);

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore<S>& ps, const std::string& name, int channels) {
    Tensor<S> ones(1, channels, 1, 1);
    ones.m.setOnes();
    gamma = ps.add(name + ".gamma", ones);
    beta = ps.add(name + ".beta", Tensor<S>(1, channels, 1, 1));
    run_mean = ps.add(name + ".running_mean", Tensor<S>(1, channels, 1, 1), false);
    Tensor<S> rv(1, channels, 1, 1);
    rv.m.setOnes();
    run_var = ps.add(name + ".running_var", rv, false);
  }

  Var<S> operator()(Var<S> x, const Ctx& ctx) const {
    return batch_norm(x, gamma, beta, run_mean.val_mut(), run_var.val_mut(),
                      ctx.training, momentum, eps);
  }
};

template <typename S>
Var<S> apply_act(Var<S> x, Act act) {
  switch (act) {
    case Act::leaky_relu: return leaky_relu(x, S(0.2));
    case Act::relu: return relu(x);
    case Act::none: return x;
  }
  return x;
}

/// Conv -> BN -> activation. Stride 1 preserves spatial dims ("same"
/// padding); stride 2 halves them.
template <typename S>
struct ConvBnAct {
  Conv2d<S> conv;
  BatchNorm2d<S> bn;
  Act act = Act::leaky_relu;

  ConvBnAct() = default;
  ConvBnAct(ParamStore<S>& ps, const std::string& name, int in_c, int out_c, int k,
            int stride, int dilation, Act activation, std::mt19937_64& rng)
      : conv(ps, name + ".conv", in_c, out_c, k, stride, dilation, rng),
        bn(ps, name + ".bn", out_c),
        act(activation) {}

  Var<S> operator()(Var<S> x, const Ctx& ctx) const {
    return apply_act(bn(conv(x), ctx), act);
  }
};

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// Two 3x3 conv-BN stages with an identity shortcut: y = x + F(x). No
/// activation after the sum so that zeroed weights give y == x exactly.
template <typename S>
struct ResidualBlock {
  ConvBnAct<S> c1;
  Conv2d<S> c2;
  BatchNorm2d<S> bn2;

  ResidualBlock() = default;
  ResidualBlock(ParamStore<S>& ps, const std::string& name, int channels, Act act,
                std::mt19937_64& rng)
      : c1(ps, name + ".c1", channels, channels, 3, 1, 1, act, rng),
        c2(ps, name + ".c2", channels, channels, 3, 1, 1, rng),
        bn2(ps, name + ".bn2", channels) {}

  Var<S> operator()(Var<S> x, const Ctx& ctx) const {
    return add(x, bn2(c2(c1(x, ctx)), ctx));
  }
};

/// Dilated residual inception: parallel 1x1 and dilated 3x3 branches at
/// out_channels/4 width, concatenated, projected back by a 1x1 conv, and
/// added to the shortcut.
template <typename S>
struct DriBlock {
  std::vector<int> rates;
  ConvBnAct<S> b1x1;
  std::vector<ConvBnAct<S>> dilated;
  Conv2d<S> proj;
  BatchNorm2d<S> proj_bn;

  DriBlock() = default;
  DriBlock(ParamStore<S>& ps, const std::string& name, int channels,
           const std::vector<int>& dilation_rates, Act act, std::mt19937_64& rng)
      : rates(dilation_rates) {
    require(!rates.empty(), "dri: empty dilation rates");
    const int width = std::max(1, channels / 4);
    b1x1 = ConvBnAct<S>(ps, name + ".b0", channels, width, 1, 1, 1, act, rng);
    for (size_t i = 0; i < rates.size(); ++i)
      dilated.emplace_back(ps, name + ".b" + std::to_string(i + 1), channels, width, 3, 1,
                           rates[i], act, rng);
    const int concat_c = width * static_cast<int>(1 + rates.size());
    proj = Conv2d<S>(ps, name + ".proj", concat_c, channels, 1, 1, 1, rng);
    proj_bn = BatchNorm2d<S>(ps, name + ".proj_bn", channels);
  }

  Var<S> operator()(Var<S> x, const Ctx& ctx) const {
    Var<S> cat = b1x1(x, ctx);
    for (const auto& br : dilated) cat = concat_channels(cat, br(x, ctx));
    return add(x, proj_bn(proj(cat), ctx));
  }
};

/// One special block of the configured kind (channel-preserving).
template <typename S>
struct SpecialBlock {
  BlockKind kind = BlockKind::residual;
  ResidualBlock<S> res;
  DriBlock<S> dri;
  ConvBnAct<S> conv;

  SpecialBlock() = default;
  SpecialBlock(ParamStore<S>& ps, const std::string& name, int channels, BlockKind k,
               const std::vector<int>& dri_rates, Act act, std::mt19937_64& rng)
      : kind(k) {
    switch (kind) {
      case BlockKind::residual: res = ResidualBlock<S>(ps, name, channels, act, rng); break;
      case BlockKind::dri: dri = DriBlock<S>(ps, name, channels, dri_rates, act, rng); break;
      case BlockKind::conv:
        conv = ConvBnAct<S>(ps, name, channels, channels, 3, 1, 1, act, rng);
        break;
    }
  }

  Var<S> operator()(Var<S> x, const Ctx& ctx) const {
    switch (kind) {
      case BlockKind::residual: return res(x, ctx);
      case BlockKind::dri: return dri(x, ctx);
      case BlockKind::conv: return conv(x, ctx);
    }
    return x;
  }
};

/// Multimodal feature fusion: two successive special blocks per branch,
/// element-wise sum of the branch outputs, then a 3x3 conv-BN-ReLU.
template <typename S>
struct MffBlock {
  SpecialBlock<S> img1, img2, guide1, guide2;
  ConvBnAct<S> fuse;

  MffBlock() = default;
  MffBlock(ParamStore<S>& ps, const std::string& name, int channels, BlockKind kind,
           const std::vector<int>& dri_rates, std::mt19937_64& rng)
      : img1(ps, name + ".img1", channels, kind, dri_rates, Act::leaky_relu, rng),
        img2(ps, name + ".img2", channels, kind, dri_rates, Act::leaky_relu, rng),
        guide1(ps, name + ".guide1", channels, kind, dri_rates, Act::leaky_relu, rng),
        guide2(ps, name + ".guide2", channels, kind, dri_rates, Act::leaky_relu, rng),
        fuse(ps, name + ".fuse", channels, channels, 3, 1, 1, Act::relu, rng) {}

  Var<S> operator()(Var<S> img_feat, Var<S> guide_feat, const Ctx& ctx) const {
    require(img_feat.val().same_shape(guide_feat.val()), "mff: branch shape mismatch");
    Var<S> a = img2(img1(img_feat, ctx), ctx);
    Var<S> b = guide2(guide1(guide_feat, ctx), ctx);
    return fuse(add(a, b), ctx);
  }
};

/// Trainable parameter count for one DRI block as configured here.
inline std::size_t dri_param_count(int channels, const std::vector<int>& rates) {
  const std::size_t w = static_cast<std::size_t>(std::max(1, channels / 4));
  const std::size_t c = static_cast<std::size_t>(channels);
  std::size_t n = 0;
  n += c * w + w + 2 * w;                      // 1x1 branch conv + bias + BN
  n += rates.size() * (9 * c * w + w + 2 * w); // dilated 3x3 branches
  const std::size_t cat = w * (1 + rates.size());
  n += cat * c + c + 2 * c;                    // projection + BN
  return n;
}

/// Parameter count of a classic inception block with 1x1/3x3/5x5/7x7 branches
/// at the same per-branch width (convs + biases + BN, no projection).
inline std::size_t inception_param_count(int channels) {
  const std::size_t w = static_cast<std::size_t>(std::max(1, channels / 4));
  const std::size_t c = static_cast<std::size_t>(channels);
  std::size_t n = 0;
  for (int k : {1, 3, 5, 7}) n += static_cast<std::size_t>(k) * k * c * w + w + 2 * w;
  return n;
}

}  // namespace fundus::nn
