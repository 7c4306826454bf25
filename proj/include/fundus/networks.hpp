#pragma once

#include "fundus/checkpoint.hpp"
#include "fundus/nn_core.hpp"

#include <string>
#include <vector>

namespace fundus::nn {

enum class Head { tanh_unit, softmax };

inline const char* to_string(Head h) { return h == Head::tanh_unit ? "tanh" : "softmax"; }

/// Encoder-decoder configuration. The depth network and the main branch of
/// the guided network are both instances of this.
struct NetworkConfig {
  int input_resolution = 256;
  int in_channels = 3;
  int base_filters = 64;
  int max_filters = 512;
  int encoder_levels = 8;
  BlockKind block_kind = BlockKind::residual;
  std::vector<int> dri_rates = {1, 2, 4};
  int dropout_levels = 3;  // first-N decoder levels, rate fixed at 0.5
  int out_channels = 1;
  Head head = Head::tanh_unit;

  void validate() const {
    require(input_resolution > 0 && base_filters > 0 && max_filters > 0 && out_channels > 0,
            "network config: sizes must be positive");
    require(encoder_levels >= 2, "network config: need at least 2 levels");
    require(dropout_levels >= 0 && dropout_levels <= encoder_levels,
            "network config: bad dropout level count");
    const int div = 1 << encoder_levels;
    require(input_resolution % div == 0,
            "input resolution " + std::to_string(input_resolution) + " not divisible by 2^" +
                std::to_string(encoder_levels));
    if (block_kind == BlockKind::dri)
      BlockConfig{block_kind, base_filters, base_filters, dri_rates}.validate();
  }

  /// Per-level encoder filters: doubling capped at max_filters.
  std::vector<int> filter_schedule() const {
    std::vector<int> f(encoder_levels);
    for (int i = 0; i < encoder_levels; ++i)
      f[i] = std::min(base_filters << i, max_filters);
    return f;
  }
};

/// Guided-network shape: a shallower guide encoder whose features fuse into
/// the main branch at fixed alternate levels.
struct GuidedConfig {
  int guide_levels = 6;
  int guide_in_channels = 1;
  std::vector<int> fusion_levels = {2, 4, 6};  // 1-indexed guide levels

  void validate(const NetworkConfig& main) const {
    require(guide_levels >= 1 && guide_levels <= main.encoder_levels,
            "guide branch cannot be deeper than the main branch");
    require(!fusion_levels.empty(), "need at least one fusion level");
    for (size_t i = 0; i < fusion_levels.size(); ++i) {
      require(fusion_levels[i] >= 1 && fusion_levels[i] <= guide_levels,
              "fusion level out of range");
      if (i) require(fusion_levels[i] > fusion_levels[i - 1], "fusion levels must increase");
    }
  }
};

/// Introspection snapshot used by structural tests and run logs.
struct ArchitectureReport {
  std::vector<int> encoder_filters;
  std::vector<bool> decoder_dropout;  // one flag per decoder level
  int main_levels = 0;
  int guide_levels = 0;
  int fusion_points = 0;
  std::string head;
};

// ---------------------------------------------------------------------------
// Shared encoder/decoder machinery
// ---------------------------------------------------------------------------

namespace detail {

/// Encoder level: 4x4 stride-2 conv + BN + leaky ReLU, then a special block.
template <typename S>
struct EncoderLevel {
  ConvBnAct<S> down;
  SpecialBlock<S> block;

  EncoderLevel() = default;
  EncoderLevel(ParamStore<S>& ps, const std::string& name, int in_c, int out_c,
               const NetworkConfig& cfg, std::mt19937_64& rng)
      : down(ps, name + ".down", in_c, out_c, 4, 2, 1, Act::leaky_relu, rng),
        block(ps, name + ".block", out_c, cfg.block_kind, cfg.dri_rates, Act::leaky_relu, rng) {}

  Var<S> operator()(Var<S> x, const Ctx& ctx) const { return block(down(x, ctx), ctx); }
};

/// Decoder level: 4x4 stride-2 deconv + BN + ReLU, optional dropout 0.5.
template <typename S>
struct DecoderLevel {
  ConvTranspose2d<S> up;
  BatchNorm2d<S> bn;
  bool use_dropout = false;

  DecoderLevel() = default;
  DecoderLevel(ParamStore<S>& ps, const std::string& name, int in_c, int out_c, bool dropout,
               std::mt19937_64& rng)
      : up(ps, name + ".up", in_c, out_c, 4, 2, rng),
        bn(ps, name + ".bn", out_c),
        use_dropout(dropout) {}

  Var<S> operator()(Var<S> x, const Ctx& ctx) const {
    Var<S> y = relu(bn(up(x), ctx));
    if (use_dropout && ctx.training) {
      require(ctx.rng != nullptr, "decoder dropout needs an RNG in training mode");
      y = dropout(y, S(0.5), true, *ctx.rng);
    }
    return y;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Depth network (also the unguided segmentation network with a softmax head)
// ---------------------------------------------------------------------------

template <typename S>
class DepthNet {
 public:
  DepthNet() = default;

  DepthNet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(mix_seed(seed, 0xDE9));
    const auto filters = cfg.filter_schedule();
    int in_c = cfg.in_channels;
    for (int i = 0; i < cfg.encoder_levels; ++i) {
      enc_.emplace_back(params_, "enc" + std::to_string(i), in_c, filters[i], cfg, rng);
      in_c = filters[i];
    }
    // Decoder mirrors the encoder; level j upsamples to the resolution of
    // encoder level L-2-j and concatenates that skip before the next level.
    for (int j = 0; j < cfg.encoder_levels; ++j) {
      const bool last = j == cfg.encoder_levels - 1;
      const int out_c = last ? cfg.base_filters : filters[cfg.encoder_levels - 2 - j];
      dec_.emplace_back(params_, "dec" + std::to_string(j), in_c, out_c,
                        j < cfg.dropout_levels, rng);
      in_c = last ? out_c : out_c + filters[cfg.encoder_levels - 2 - j];
    }
    head_ = Conv2d<S>(params_, "head", in_c, cfg.out_channels, 1, 1, 1, rng);
  }

  /// Raw head output before the range activation (logits for softmax).
  Var<S> forward_raw(Var<S> x, const Ctx& ctx) const {
    require(x.val().c == cfg_.in_channels, "forward: channel mismatch");
    require(x.val().h == cfg_.input_resolution && x.val().w == cfg_.input_resolution,
            "forward: expected " + std::to_string(cfg_.input_resolution) + "x" +
                std::to_string(cfg_.input_resolution) + " input, got " +
                std::to_string(x.val().h) + "x" + std::to_string(x.val().w));
    std::vector<Var<S>> skips;
    Var<S> cur = x;
    for (const auto& level : enc_) {
      cur = level(cur, ctx);
      skips.push_back(cur);
    }
    const int L = cfg_.encoder_levels;
    for (int j = 0; j < L; ++j) {
      cur = dec_[j](cur, ctx);
      if (j < L - 1) cur = concat_channels(cur, skips[L - 2 - j]);
    }
    return head_(cur);
  }

  /// Tanh head remapped to [0,1]; softmax head yields per-pixel distributions.
  Var<S> forward(Var<S> x, const Ctx& ctx) const {
    Var<S> raw = forward_raw(x, ctx);
    if (cfg_.head == Head::tanh_unit)
      return affine(tanh_act(raw), S(0.5), S(0.5));
    return softmax_channels(raw);
  }

  ArchitectureReport report() const {
    ArchitectureReport r;
    r.encoder_filters = cfg_.filter_schedule();
    for (const auto& d : dec_) r.decoder_dropout.push_back(d.use_dropout);
    r.main_levels = cfg_.encoder_levels;
    r.head = to_string(cfg_.head);
    return r;
  }

  const NetworkConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

 private:
  NetworkConfig cfg_;
  ParamStore<S> params_;
  std::vector<detail::EncoderLevel<S>> enc_;
  std::vector<detail::DecoderLevel<S>> dec_;
  Conv2d<S> head_;
};

// ---------------------------------------------------------------------------
// Depth-guided segmentation network
// ---------------------------------------------------------------------------

/// Main branch: full encoder-decoder with a softmax head. Guide branch: a
/// shallower encoder over the depth input. At each fusion level the two
/// same-shape features pass through an MFF block whose output re-enters the
/// main branch only; decoder skips are the post-fusion main features.
template <typename S>
class GuidedSegNet {
 public:
  GuidedSegNet() = default;

  GuidedSegNet(const NetworkConfig& cfg, const GuidedConfig& gcfg, std::uint64_t seed)
      : cfg_(cfg), gcfg_(gcfg) {
    cfg.validate();
    gcfg.validate(cfg);
    std::mt19937_64 rng(mix_seed(seed, 0x5E6));
    const auto filters = cfg.filter_schedule();

    int in_c = cfg.in_channels;
    for (int i = 0; i < cfg.encoder_levels; ++i) {
      main_enc_.emplace_back(params_, "main.enc" + std::to_string(i), in_c, filters[i], cfg, rng);
      in_c = filters[i];
    }
    int gin_c = gcfg.guide_in_channels;
    for (int i = 0; i < gcfg.guide_levels; ++i) {
      guide_enc_.emplace_back(params_, "guide.enc" + std::to_string(i), gin_c, filters[i], cfg,
                              rng);
      gin_c = filters[i];
    }
    for (int level : gcfg.fusion_levels)
      fuse_.emplace_back(params_, "fuse" + std::to_string(level), filters[level - 1],
                         cfg.block_kind, cfg.dri_rates, rng);

    in_c = filters[cfg.encoder_levels - 1];
    for (int j = 0; j < cfg.encoder_levels; ++j) {
      const bool last = j == cfg.encoder_levels - 1;
      const int out_c = last ? cfg.base_filters : filters[cfg.encoder_levels - 2 - j];
      dec_.emplace_back(params_, "dec" + std::to_string(j), in_c, out_c,
                        j < cfg.dropout_levels, rng);
      in_c = last ? out_c : out_c + filters[cfg.encoder_levels - 2 - j];
    }
    head_ = Conv2d<S>(params_, "head", in_c, cfg.out_channels, 1, 1, 1, rng);
  }

  Var<S> forward_raw(Var<S> image, Var<S> guide, const Ctx& ctx) const {
    require(image.val().h == guide.val().h && image.val().w == guide.val().w &&
                image.val().n == guide.val().n,
            "forward: image/guide shape mismatch");
    require(guide.val().c == gcfg_.guide_in_channels, "forward: guide channel mismatch");
    require(image.val().h == cfg_.input_resolution && image.val().w == cfg_.input_resolution,
            "forward: expected " + std::to_string(cfg_.input_resolution) + "x" +
                std::to_string(cfg_.input_resolution) + " input, got " +
                std::to_string(image.val().h) + "x" + std::to_string(image.val().w));

    std::vector<Var<S>> skips;
    Var<S> main_cur = image;
    Var<S> guide_cur = guide;
    std::size_t next_fuse = 0;
    for (int i = 0; i < cfg_.encoder_levels; ++i) {
      main_cur = main_enc_[i](main_cur, ctx);
      if (i < gcfg_.guide_levels) {
        guide_cur = guide_enc_[i](guide_cur, ctx);
        if (next_fuse < gcfg_.fusion_levels.size() &&
            gcfg_.fusion_levels[next_fuse] == i + 1) {
          // Fused features re-enter the main branch; the guide branch
          // continues from its own un-fused output.
          main_cur = fuse_[next_fuse](main_cur, guide_cur, ctx);
          ++next_fuse;
        }
      }
      skips.push_back(main_cur);
    }
    const int L = cfg_.encoder_levels;
    Var<S> cur = main_cur;
    for (int j = 0; j < L; ++j) {
      cur = dec_[j](cur, ctx);
      if (j < L - 1) cur = concat_channels(cur, skips[L - 2 - j]);
    }
    return head_(cur);
  }

  Var<S> forward(Var<S> image, Var<S> guide, const Ctx& ctx) const {
    return softmax_channels(forward_raw(image, guide, ctx));
  }

  ArchitectureReport report() const {
    ArchitectureReport r;
    r.encoder_filters = cfg_.filter_schedule();
    for (const auto& d : dec_) r.decoder_dropout.push_back(d.use_dropout);
    r.main_levels = cfg_.encoder_levels;
    r.guide_levels = gcfg_.guide_levels;
    r.fusion_points = static_cast<int>(fuse_.size());
    r.head = to_string(cfg_.head);
    return r;
  }

  const NetworkConfig& config() const { return cfg_; }
  const GuidedConfig& guided_config() const { return gcfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  /// True for parameters owned by the guide encoder (liveness checks).
  static bool is_guide_param(const std::string& name) {
    return name.rfind("guide.", 0) == 0;
  }

 private:
  NetworkConfig cfg_;
  GuidedConfig gcfg_;
  ParamStore<S> params_;
  std::vector<detail::EncoderLevel<S>> main_enc_;
  std::vector<detail::EncoderLevel<S>> guide_enc_;
  std::vector<MffBlock<S>> fuse_;
  std::vector<detail::DecoderLevel<S>> dec_;
  Conv2d<S> head_;
};

// ---------------------------------------------------------------------------
// Checkpoint glue
// ---------------------------------------------------------------------------

template <typename S>
void store_params(const ParamStore<S>& ps, CheckpointFile& ckpt) {
  for (const auto& e : ps.entries())
    ckpt.tensors.emplace_back(e.name, e.var.val().template cast<float>());
}

/// Strict restore: every parameter must be present with matching shape.
template <typename S>
void load_params(ParamStore<S>& ps, const CheckpointFile& ckpt) {
  for (auto& e : ps.entries()) {
    const TensorF* t = ckpt.find(e.name);
    if (!t) fail("checkpoint missing parameter: " + e.name);
    require(t->n == e.var.val().n && t->c == e.var.val().c && t->h == e.var.val().h &&
                t->w == e.var.val().w,
            "checkpoint shape mismatch for " + e.name);
    e.var.val_mut() = t->template cast<S>();
  }
}

/// Warm start: copy every tensor whose name and shape both match; everything
/// else keeps its fresh initialization. Returns the number of tensors copied.
template <typename S>
int warm_start_params(ParamStore<S>& ps, const CheckpointFile& ckpt) {
  int copied = 0;
  for (auto& e : ps.entries()) {
    const TensorF* t = ckpt.find(e.name);
    if (!t || !(t->n == e.var.val().n && t->c == e.var.val().c && t->h == e.var.val().h &&
                t->w == e.var.val().w))
      continue;
    e.var.val_mut() = t->template cast<S>();
    ++copied;
  }
  return copied;
}

}  // namespace fundus::nn
