// fundus: retinal fundus depth estimation and optic disc/cup segmentation.
// Subcommands cover the full pipeline: pseudo-depth target synthesis,
// reconstruction pretraining, depth/segmentation training, inference, CRF
// refinement, metric evaluation, and ROC plotting.

#include "fundus/crf.hpp"
#include "fundus/evaluation.hpp"
#include "fundus/plot.hpp"
#include "fundus/pseudo_depth.hpp"
#include "fundus/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fundus;

namespace {

/// Configuration mistakes (bad flag values, missing inputs) exit 2; everything
/// else that throws exits 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename F>
auto usage_checked(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

void need(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required ") + flag);
}

void need_file(const std::string& path, const char* flag) {
  need(path, flag);
  if (!fs::exists(path)) throw UsageError(std::string(flag) + ": file not found: " + path);
}

void check_member(const std::string& value, std::initializer_list<const char*> allowed,
                  const char* flag) {
  for (const char* a : allowed)
    if (value == a) return;
  std::string msg = std::string("bad value '") + value + "' for " + flag + " (expected one of";
  for (const char* a : allowed) msg += std::string(" ") + a;
  throw UsageError(msg + ")");
}

// ---------------------------------------------------------------------------
// Options and the config-file merge
// ---------------------------------------------------------------------------

struct Options {
  std::string config_path;
  std::string manifest, val_manifest;
  std::string out;
  std::string checkpoint, depth_checkpoint, init_checkpoint;
  std::string pred_dir;
  std::string metrics_csv;
  std::string image_path, prob_path, depth_path;
  std::uint64_t seed = 1;
  bool dry_run = false;

  // network shape
  int resolution = 256;
  int levels = 8;
  int base_filters = 64;
  int max_filters = 512;
  std::string block = "residual";
  std::vector<int> dri_rates = {1, 2, 4};
  std::string guide = "none";
  int guide_levels = 6;
  std::vector<int> fusion_levels = {2, 4, 6};

  // training
  int batch_size = 10;
  int epochs = 0;  // 0 = per-command default (pretrain 50, depth 200, seg 100)
  long max_steps = 0;
  double lr = 2e-4;
  int patience = 20;
  std::string loss = "l2";
  double noise_sigma = 0.05;
  int augment = 1;
  std::string target = "pseudo_depth";
  std::string pretrain = "none";
  int pretrain_epochs = 50;
  long pretrain_steps = 0;

  // crf
  bool crf = false;
  double w1 = 5, w2 = 5, w3 = 3;
  double theta_alpha = 30, theta_beta = 10, theta_gamma = 0.1;
  int iters = 10;
  std::string engine = "automatic";

  // evaluation
  double tau = 0.5;
};

/// Tracks every registered flag so a JSON config file can fill in values the
/// command line left untouched (defaults < config file < flags) and so the
/// fully resolved configuration can be frozen per run.
class OptionRegistry {
 public:
  template <typename T>
  CLI::Option* add(CLI::App& cmd, const std::string& flag, T& var, const std::string& desc) {
    CLI::Option* opt = cmd.add_option(flag, var, desc);
    note(opt, var);
    return opt;
  }

  CLI::Option* add_flag(CLI::App& cmd, const std::string& flag, bool& var,
                        const std::string& desc) {
    CLI::Option* opt = cmd.add_flag(flag, var, desc);
    note(opt, var);
    return opt;
  }

  void apply_file(const json& cfg) {
    if (!cfg.is_object()) throw UsageError("config file must hold a JSON object");
    for (const auto& [key, value] : cfg.items()) {
      const Entry* entry = nullptr;
      for (const auto& e : entries_)
        if (e.key == key) entry = &e;
      if (!entry) throw UsageError("unknown config key: " + key);
      if (entry->opt->count() == 0) {
        try {
          entry->set(value);
        } catch (const std::exception&) {
          throw UsageError("config key '" + key + "' has the wrong type");
        }
      }
    }
  }

  json resolved() const {
    json j;
    for (const auto& e : entries_) j[e.key] = e.get();
    return j;
  }

 private:
  struct Entry {
    CLI::Option* opt;
    std::string key;
    std::function<void(const json&)> set;
    std::function<json()> get;
  };

  template <typename T>
  void note(CLI::Option* opt, T& var) {
    entries_.push_back({opt, opt->get_single_name(),
                        [&var](const json& j) { var = j.get<T>(); },
                        [&var] { return json(var); }});
  }

  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(double v) { return std::isfinite(v) ? fmt_double(v) : std::string(); }

DatasetManifest open_manifest(const std::string& path, const char* flag) {
  need_file(path, flag);
  DatasetManifest m = read_manifest(path);
  if (m.entries.empty()) fail("manifest has no samples: " + path);
  return m;
}

nn::Head head_from_string(const std::string& s) {
  if (s == "tanh") return nn::Head::tanh_unit;
  if (s == "softmax") return nn::Head::softmax;
  fail("unknown head: " + s);
}

json network_json(const nn::NetworkConfig& c) {
  return {{"input_resolution", c.input_resolution}, {"in_channels", c.in_channels},
          {"base_filters", c.base_filters},         {"max_filters", c.max_filters},
          {"encoder_levels", c.encoder_levels},     {"block", nn::to_string(c.block_kind)},
          {"dri_rates", c.dri_rates},               {"dropout_levels", c.dropout_levels},
          {"out_channels", c.out_channels},         {"head", nn::to_string(c.head)}};
}

nn::NetworkConfig network_from_json(const json& j) {
  nn::NetworkConfig c;
  c.input_resolution = j.at("input_resolution").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.base_filters = j.at("base_filters").get<int>();
  c.max_filters = j.at("max_filters").get<int>();
  c.encoder_levels = j.at("encoder_levels").get<int>();
  c.block_kind = nn::block_kind_from_string(j.at("block").get<std::string>());
  c.dri_rates = j.at("dri_rates").get<std::vector<int>>();
  c.dropout_levels = j.at("dropout_levels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.head = head_from_string(j.at("head").get<std::string>());
  c.validate();
  return c;
}

json guided_json(const nn::GuidedConfig& g) {
  return {{"guide_levels", g.guide_levels},
          {"guide_in_channels", g.guide_in_channels},
          {"fusion_levels", g.fusion_levels}};
}

nn::GuidedConfig guided_from_json(const json& j) {
  nn::GuidedConfig g;
  g.guide_levels = j.at("guide_levels").get<int>();
  g.guide_in_channels = j.at("guide_in_channels").get<int>();
  g.fusion_levels = j.at("fusion_levels").get<std::vector<int>>();
  return g;
}

nn::NetworkConfig base_net(const Options& o, int out_channels, nn::Head head) {
  nn::NetworkConfig c;
  c.input_resolution = o.resolution;
  c.base_filters = o.base_filters;
  c.max_filters = o.max_filters;
  c.encoder_levels = o.levels;
  c.block_kind = nn::block_kind_from_string(o.block);
  c.dri_rates = o.dri_rates;
  c.dropout_levels = std::min(3, o.levels);
  c.out_channels = out_channels;
  c.head = head;
  c.validate();
  return c;
}

nn::TrainConfig train_cfg(const Options& o) {
  nn::TrainConfig t;
  t.batch_size = o.batch_size;
  t.epochs = o.epochs;
  t.lr = o.lr;
  t.seed = o.seed;
  t.patience = o.patience;
  t.loss = nn::loss_kind_from_string(o.loss);
  t.max_steps = o.max_steps;
  t.validate();
  return t;
}

crf::CrfParams crf_params(const Options& o) {
  crf::CrfParams p;
  p.w1 = o.w1;
  p.w2 = o.w2;
  p.w3 = o.w3;
  p.theta_alpha = o.theta_alpha;
  p.theta_beta = o.theta_beta;
  p.theta_gamma = o.theta_gamma;
  p.iterations = o.iters;
  p.validate();
  return p;
}

crf::CrfEngine engine_from_string(const std::string& s) {
  if (s == "exact") return crf::CrfEngine::exact;
  if (s == "fast") return crf::CrfEngine::fast;
  if (s == "automatic") return crf::CrfEngine::automatic;
  fail("unknown engine: " + s);
}

NpyArray npy_from_tensor(const TensorF& t) {
  require(t.n == 1, "expected a single-sample tensor");
  NpyArray a;
  a.shape = {static_cast<std::size_t>(t.c), static_cast<std::size_t>(t.h),
             static_cast<std::size_t>(t.w)};
  a.data.resize(static_cast<std::size_t>(t.size()));
  std::size_t k = 0;
  for (int c = 0; c < t.c; ++c)
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) a.data[k++] = t.at(0, c, y, x);
  return a;
}

TensorF tensor_from_npy(const NpyArray& a) {
  require(a.shape.size() == 3, "expected a (channels, height, width) array");
  TensorF t(1, static_cast<int>(a.shape[0]), static_cast<int>(a.shape[1]),
            static_cast<int>(a.shape[2]));
  std::size_t k = 0;
  for (int c = 0; c < t.c; ++c)
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) t.at(0, c, y, x) = a.data[k++];
  return t;
}

LabelPlane argmax_plane(const TensorF& prob) {
  LabelPlane lp(prob.h, prob.w);
  for (int y = 0; y < prob.h; ++y)
    for (int x = 0; x < prob.w; ++x) {
      Eigen::Index best;
      prob.m.col(static_cast<Eigen::Index>(y) * prob.w + x).maxCoeff(&best);
      lp(y, x) = static_cast<int>(best);
    }
  return lp;
}

/// Class indices stored as raw 8-bit gray levels (value k = class k).
void write_labels_png(const std::string& path, const LabelPlane& lp) {
  ImageF img(1, static_cast<int>(lp.rows()), static_cast<int>(lp.cols()));
  img.planes[0] = lp.cast<float>() / 255.0f;
  write_png8(path, img);
}

/// Bilinear per-channel resize of a probability map with per-pixel
/// renormalization so columns stay on the simplex.
TensorF resize_prob(const TensorF& prob, int h, int w) {
  if (prob.h == h && prob.w == w) return prob;
  std::vector<PlaneF> planes;
  for (int c = 0; c < prob.c; ++c) planes.push_back(resize_bilinear(prob.plane(0, c), h, w));
  TensorF out = TensorF::from_planes(planes);
  for (Eigen::Index j = 0; j < out.m.cols(); ++j) {
    const float z = out.m.col(j).sum();
    if (z > 0) out.m.col(j) /= z;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sample loading and augmentation
// ---------------------------------------------------------------------------

std::vector<Sample> load_and_augment(const DatasetManifest& m, int resolution, int multiplier,
                                     std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    Sample s = load_sample(m, m.entries[i], resolution);
    if (multiplier <= 1) {
      out.push_back(std::move(s));
      continue;
    }
    AugmentPolicy pol;
    pol.multiplier = multiplier;
    for (auto& a : augment(s, pol, mix_seed(seed, 0xA06, i))) out.push_back(std::move(a));
  }
  return out;
}

/// A depth network wrapped for single-image eval-mode inference.
struct DepthModel {
  nn::NetworkConfig cfg;
  std::unique_ptr<nn::DepthNet<float>> net;

  PlaneF infer(const ImageF& img) const {
    nn::Ctx ctx{false, nullptr};
    TensorF y = net->forward(nn::Var<float>::leaf(nn::image_tensor(img), false), ctx).val();
    return y.plane(0, 0);
  }
};

DepthModel load_depth_model(const std::string& path, std::uint64_t seed) {
  CheckpointFile ck = load_checkpoint(path);
  if (!ck.meta.contains("network")) fail("checkpoint lacks network metadata: " + path);
  DepthModel m;
  m.cfg = network_from_json(ck.meta["network"]);
  m.net = std::make_unique<nn::DepthNet<float>>(m.cfg, seed);
  nn::load_params(m.net->params(), ck);
  return m;
}

// ---------------------------------------------------------------------------
// Run bookkeeping
// ---------------------------------------------------------------------------

/// Prints the frozen config on --dry-run (returns false: touch nothing);
/// otherwise creates the output directory and freezes the config there.
bool begin_run(const std::string& name, const Options& o, const OptionRegistry& reg) {
  json frozen{{"command", name}, {"options", reg.resolved()}};
  if (o.dry_run) {
    std::cout << frozen.dump(2) << "\n";
    return false;
  }
  fs::create_directories(o.out);
  std::ofstream f(o.out + "/config.json");
  f << frozen.dump(2) << "\n";
  return true;
}

void write_result(const std::string& out, const json& j) {
  std::ofstream f(out + "/result.json");
  f << j.dump(2) << "\n";
}

json train_summary(const nn::TrainResult& r) {
  json j{{"steps", r.steps}, {"epochs", r.epochs_run}};
  if (!r.step_losses.empty()) j["final_loss"] = r.step_losses.back();
  if (std::isfinite(r.best_val)) {
    j["best_val"] = r.best_val;
    j["best_epoch"] = r.best_epoch;
  }
  return j;
}

void stamp_checkpoints(const std::string& dir, const json& extra) {
  for (const char* name : {"/best.ckpt", "/last.ckpt"}) {
    const std::string path = dir + name;
    if (!fs::exists(path)) continue;
    CheckpointFile ck = load_checkpoint(path);
    for (const auto& [k, v] : extra.items()) ck.meta[k] = v;
    save_checkpoint(path, ck);
  }
}

/// best.ckpt when a validation set produced one, last.ckpt otherwise.
std::string preferred_checkpoint(const std::string& dir) {
  if (fs::exists(dir + "/best.ckpt")) return dir + "/best.ckpt";
  return dir + "/last.ckpt";
}

// ---------------------------------------------------------------------------
// ROC rendering
// ---------------------------------------------------------------------------

void render_roc_png(const std::string& path, const std::vector<std::pair<double, double>>& curve,
                    double auc) {
  PlotSeries roc{"CDR threshold sweep", {}, {}};
  for (const auto& [fpr, tpr] : curve) {
    roc.x.push_back(fpr);
    roc.y.push_back(tpr);
  }
  const PlotSeries diagonal{"chance", {0.0, 1.0}, {0.0, 1.0}};
  char title[48];
  std::snprintf(title, sizeof title, "ROC  AUC=%.4f", auc);
  render_line_plot(path, title, "false positive rate", "tpr", {roc, diagonal});
}

void write_roc_csv(const std::string& path, const std::vector<std::pair<double, double>>& curve) {
  std::ofstream f(path);
  f << "fpr,tpr\n";
  for (const auto& [fpr, tpr] : curve) f << fmt_double(fpr) << "," << fmt_double(tpr) << "\n";
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_pseudo_depth(Options& o, const OptionRegistry& reg) {
  need_file(o.manifest, "--manifest");
  if (!begin_run("pseudo-depth", o, reg)) return 0;
  const DatasetManifest m = open_manifest(o.manifest, "--manifest");
  for (const auto& e : m.entries) {
    const Sample s = load_sample(m, e, o.resolution);
    const MaskPlane vessels = segment_vessels(s.image);
    const PseudoDepthMap pd = make_pseudo_depth(s.image, vessels);
    write_png16(o.out + "/" + e.id + ".depth.png", pd.values);
    ImageF mask_img(1, s.image.height(), s.image.width());
    mask_img.planes[0] = vessels.cast<float>();
    write_png8(o.out + "/" + e.id + ".vessels.png", mask_img);
  }
  write_result(o.out, {{"samples", m.entries.size()}});
  std::cout << "wrote pseudo-depth maps for " << m.entries.size() << " samples to " << o.out
            << "\n";
  return 0;
}

/// Shared by `pretrain` and the pretraining phase of `train-depth`.
nn::TrainResult run_pretrain_phase(const Options& o, const std::string& target,
                                   const std::string& out_dir, int epochs, long max_steps) {
  const bool denoise = target == "denoise";
  const nn::NetworkConfig cfg = base_net(o, denoise ? 3 : 1, nn::Head::tanh_unit);

  auto make_pairs = [&](const DatasetManifest& m, int multiplier) {
    std::vector<nn::SupervisedPair> pairs;
    for (const auto& s : load_and_augment(m, o.resolution, multiplier, o.seed)) {
      TensorF x = nn::image_tensor(s.image.image);
      TensorF y = denoise ? x : nn::plane_tensor(make_pseudo_depth(s.image).values);
      pairs.push_back({std::move(x), std::move(y)});
    }
    return pairs;
  };
  const auto train = make_pairs(open_manifest(o.manifest, "--manifest"), o.augment);
  std::vector<nn::SupervisedPair> val;
  if (!o.val_manifest.empty()) val = make_pairs(open_manifest(o.val_manifest, "--val-manifest"), 1);

  nn::DepthNet<float> net(cfg, o.seed);
  nn::TrainConfig t = train_cfg(o);
  t.epochs = epochs;
  t.max_steps = max_steps;
  t.noise_sigma = denoise ? o.noise_sigma : 0.0;
  t.out_dir = out_dir;
  const nn::TrainResult res = nn::train_reconstruction(net, train, val, t);
  stamp_checkpoints(out_dir, {{"network", network_json(cfg)},
                              {"guide_source", "none"},
                              {"pretrain_target", target}});
  return res;
}

int cmd_pretrain(Options& o, const OptionRegistry& reg) {
  need_file(o.manifest, "--manifest");
  if (!o.val_manifest.empty()) need_file(o.val_manifest, "--val-manifest");
  check_member(o.target, {"pseudo_depth", "denoise"}, "--target");
  check_member(o.loss, {"l2", "l1", "berhu"}, "--loss");
  if (o.epochs == 0) o.epochs = 50;
  usage_checked([&] {
    base_net(o, o.target == "denoise" ? 3 : 1, nn::Head::tanh_unit);
    train_cfg(o);
  });
  if (!begin_run("pretrain", o, reg)) return 0;

  const nn::TrainResult res = run_pretrain_phase(o, o.target, o.out, o.epochs, o.max_steps);
  const json summary = train_summary(res);
  write_result(o.out, summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_train_depth(Options& o, const OptionRegistry& reg) {
  need_file(o.manifest, "--manifest");
  if (!o.val_manifest.empty()) need_file(o.val_manifest, "--val-manifest");
  check_member(o.pretrain, {"none", "pseudo_depth", "denoise"}, "--pretrain");
  check_member(o.loss, {"l2", "l1", "berhu"}, "--loss");
  if (o.pretrain != "none" && o.pretrain_epochs < 1)
    throw UsageError("--pretrain-epochs must be >= 1");
  if (!o.init_checkpoint.empty()) need_file(o.init_checkpoint, "--init");
  if (o.epochs == 0) o.epochs = 200;
  const nn::NetworkConfig cfg =
      usage_checked([&] { return base_net(o, 1, nn::Head::tanh_unit); });
  usage_checked([&] { train_cfg(o); });

  const DatasetManifest m = open_manifest(o.manifest, "--manifest");
  for (const auto& e : m.entries)
    if (!e.depth_path)
      throw UsageError("train-depth needs depth targets; manifest row '" + e.id +
                       "' has no depth entry");
  if (!begin_run("train-depth", o, reg)) return 0;

  json summary;
  std::string warm_from = o.init_checkpoint;
  if (o.pretrain != "none") {
    std::cout << "pretraining (" << o.pretrain << ") ...\n";
    const nn::TrainResult pre =
        run_pretrain_phase(o, o.pretrain, o.out + "/pretrain", o.pretrain_epochs, o.pretrain_steps);
    summary["pretrain"] = train_summary(pre);
    warm_from = preferred_checkpoint(o.out + "/pretrain");
  }

  auto make_pairs = [&](const DatasetManifest& mm, int multiplier) {
    std::vector<nn::SupervisedPair> pairs;
    for (const auto& s : load_and_augment(mm, o.resolution, multiplier, o.seed)) {
      if (!s.depth) fail("sample '" + s.image.source_id + "' lost its depth target");
      pairs.push_back({nn::image_tensor(s.image.image), nn::plane_tensor(*s.depth)});
    }
    return pairs;
  };
  const auto train = make_pairs(m, o.augment);
  std::vector<nn::SupervisedPair> val;
  if (!o.val_manifest.empty()) val = make_pairs(open_manifest(o.val_manifest, "--val-manifest"), 1);

  nn::DepthNet<float> net(cfg, o.seed);
  if (!warm_from.empty()) {
    const int loaded = nn::warm_start_params(net.params(), load_checkpoint(warm_from));
    summary["warm_started_tensors"] = loaded;
    std::cout << "warm start from " << warm_from << ": " << loaded << " tensors\n";
  }
  nn::TrainConfig t = train_cfg(o);
  t.out_dir = o.out;
  const nn::TrainResult res = nn::train_reconstruction(net, train, val, t);
  stamp_checkpoints(o.out, {{"network", network_json(cfg)}, {"guide_source", "none"}});

  summary["train"] = train_summary(res);
  write_result(o.out, summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_train_seg(Options& o, const OptionRegistry& reg) {
  need_file(o.manifest, "--manifest");
  if (!o.val_manifest.empty()) need_file(o.val_manifest, "--val-manifest");
  check_member(o.guide, {"none", "depth", "pseudo_depth"}, "--guide");
  if (o.guide == "depth") need_file(o.depth_checkpoint, "--depth-checkpoint");
  if (!o.init_checkpoint.empty()) need_file(o.init_checkpoint, "--init");
  if (o.epochs == 0) o.epochs = 100;
  const nn::NetworkConfig cfg = usage_checked([&] { return base_net(o, 3, nn::Head::softmax); });
  nn::GuidedConfig gcfg;
  gcfg.guide_levels = o.guide_levels;
  gcfg.fusion_levels = o.fusion_levels;
  if (o.guide != "none") usage_checked([&] { gcfg.validate(cfg); });
  usage_checked([&] { train_cfg(o); });

  const DatasetManifest m = open_manifest(o.manifest, "--manifest");
  for (const auto& e : m.entries)
    if (!e.label_path)
      throw UsageError("train-seg needs labels; manifest row '" + e.id + "' has no label entry");
  if (!begin_run("train-seg", o, reg)) return 0;

  std::unique_ptr<DepthModel> dm;
  if (o.guide == "depth") dm = std::make_unique<DepthModel>(load_depth_model(o.depth_checkpoint, o.seed));

  auto make_samples = [&](const DatasetManifest& mm, int multiplier) {
    std::vector<nn::SegSample> out;
    for (const auto& s : load_and_augment(mm, o.resolution, multiplier, o.seed)) {
      if (!s.labels) fail("sample '" + s.image.source_id + "' lost its labels");
      nn::SegSample seg;
      seg.image = nn::image_tensor(s.image.image);
      if (o.guide == "depth") seg.guide = nn::plane_tensor(dm->infer(s.image.image));
      if (o.guide == "pseudo_depth") seg.guide = nn::plane_tensor(make_pseudo_depth(s.image).values);
      seg.labels = nn::labels_vector(*s.labels);
      out.push_back(std::move(seg));
    }
    return out;
  };
  const auto train = make_samples(m, o.augment);
  std::vector<nn::SegSample> val;
  if (!o.val_manifest.empty())
    val = make_samples(open_manifest(o.val_manifest, "--val-manifest"), 1);

  nn::TrainConfig t = train_cfg(o);
  t.out_dir = o.out;
  json summary;
  nn::TrainResult res;
  json stamp{{"network", network_json(cfg)}, {"guide_source", o.guide}};
  if (o.guide == "none") {
    nn::DepthNet<float> net(cfg, o.seed);
    if (!o.init_checkpoint.empty())
      summary["warm_started_tensors"] =
          nn::warm_start_params(net.params(), load_checkpoint(o.init_checkpoint));
    res = nn::train_segmentation(net, train, val, t);
  } else {
    nn::GuidedSegNet<float> net(cfg, gcfg, o.seed);
    if (!o.init_checkpoint.empty())
      summary["warm_started_tensors"] =
          nn::warm_start_params(net.params(), load_checkpoint(o.init_checkpoint));
    res = nn::train_segmentation(net, train, val, t);
    stamp["guided"] = guided_json(gcfg);
  }
  stamp_checkpoints(o.out, stamp);

  summary["train"] = train_summary(res);
  write_result(o.out, summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_infer_depth(Options& o, const OptionRegistry& reg) {
  need_file(o.manifest, "--manifest");
  need_file(o.checkpoint, "--checkpoint");
  if (!begin_run("infer-depth", o, reg)) return 0;

  const DepthModel dm = load_depth_model(o.checkpoint, o.seed);
  const DatasetManifest m = open_manifest(o.manifest, "--manifest");
  for (const auto& e : m.entries) {
    const Sample s = load_sample(m, e, dm.cfg.input_resolution);
    write_png16(o.out + "/" + e.id + ".depth.png", dm.infer(s.image.image));
  }
  write_result(o.out, {{"samples", m.entries.size()}});
  std::cout << "wrote depth maps for " << m.entries.size() << " samples to " << o.out << "\n";
  return 0;
}

int cmd_infer_seg(Options& o, const OptionRegistry& reg) {
  need_file(o.manifest, "--manifest");
  need_file(o.checkpoint, "--checkpoint");
  check_member(o.engine, {"exact", "fast", "automatic"}, "--engine");
  const crf::CrfParams params = usage_checked([&] { return crf_params(o); });
  const crf::CrfEngine engine = engine_from_string(o.engine);

  CheckpointFile ck = load_checkpoint(o.checkpoint);
  if (!ck.meta.contains("network")) fail("checkpoint lacks network metadata: " + o.checkpoint);
  const nn::NetworkConfig cfg = network_from_json(ck.meta["network"]);
  const std::string guide_source = ck.meta.value("guide_source", std::string("none"));
  if (guide_source == "depth") need_file(o.depth_checkpoint, "--depth-checkpoint");
  if (!begin_run("infer-seg", o, reg)) return 0;

  std::unique_ptr<nn::DepthNet<float>> plain;
  std::unique_ptr<nn::GuidedSegNet<float>> guided;
  if (guide_source == "none") {
    plain = std::make_unique<nn::DepthNet<float>>(cfg, o.seed);
    nn::load_params(plain->params(), ck);
  } else {
    const nn::GuidedConfig gcfg = guided_from_json(ck.meta.at("guided"));
    guided = std::make_unique<nn::GuidedSegNet<float>>(cfg, gcfg, o.seed);
    nn::load_params(guided->params(), ck);
  }
  std::unique_ptr<DepthModel> dm;
  if (guide_source == "depth") dm = std::make_unique<DepthModel>(load_depth_model(o.depth_checkpoint, o.seed));

  const DatasetManifest m = open_manifest(o.manifest, "--manifest");
  const nn::Ctx ctx{false, nullptr};
  for (const auto& e : m.entries) {
    const Sample s = load_sample(m, e, cfg.input_resolution);
    PlaneF guide_depth;
    bool has_guide = false;
    if (guide_source == "depth") {
      guide_depth = dm->infer(s.image.image);
      has_guide = true;
    } else if (guide_source == "pseudo_depth") {
      guide_depth = make_pseudo_depth(s.image).values;
      has_guide = true;
    }

    TensorF prob;
    if (plain) {
      prob = plain->forward(nn::Var<float>::leaf(nn::image_tensor(s.image.image), false), ctx).val();
    } else {
      prob = guided->forward(nn::Var<float>::leaf(nn::image_tensor(s.image.image), false),
                             nn::Var<float>::leaf(nn::plane_tensor(guide_depth), false), ctx)
                 .val();
    }

    LabelPlane labels;
    if (o.crf) {
      const crf::UnaryField unary = crf::compute_unary(prob);
      const crf::CrfResult res = crf::mean_field_refine(unary, s.image.image,
                                              has_guide ? &guide_depth : nullptr, params, engine);
      prob.m = res.q;
      labels = res.labels;
    } else {
      labels = argmax_plane(prob);
    }

    write_npy(o.out + "/" + e.id + ".prob.npy", npy_from_tensor(prob));
    write_labels_png(o.out + "/" + e.id + ".labels.png", labels);
    if (has_guide) write_png16(o.out + "/" + e.id + ".depth.png", guide_depth);
  }
  write_result(o.out, {{"samples", m.entries.size()}, {"crf", o.crf}});
  std::cout << "wrote segmentations for " << m.entries.size() << " samples to " << o.out << "\n";
  return 0;
}

int cmd_crf_refine(Options& o, const OptionRegistry& reg) {
  check_member(o.engine, {"exact", "fast", "automatic"}, "--engine");
  const crf::CrfParams params = usage_checked([&] { return crf_params(o); });
  const crf::CrfEngine engine = engine_from_string(o.engine);
  const bool single = !o.prob_path.empty();
  if (single) {
    need_file(o.prob_path, "--prob");
    need_file(o.image_path, "--image");
    if (!o.depth_path.empty()) need_file(o.depth_path, "--depth");
  } else {
    need_file(o.manifest, "--manifest");
    need(o.pred_dir, "--pred");
    if (!fs::is_directory(o.pred_dir)) throw UsageError("--pred: not a directory: " + o.pred_dir);
  }
  if (!begin_run("crf-refine", o, reg)) return 0;

  auto refine_one = [&](const std::string& id, const TensorF& prob, const ImageF& image,
                        const PlaneF* depth) {
    ImageF img = image;
    if (img.height() != prob.h || img.width() != prob.w) img = resize_image(img, prob.h, prob.w);
    PlaneF d;
    if (depth) d = resize_bilinear(*depth, prob.h, prob.w);
    const crf::UnaryField unary = crf::compute_unary(prob);
    const crf::CrfResult res = crf::mean_field_refine(unary, img, depth ? &d : nullptr, params, engine);
    TensorF q = prob;
    q.m = res.q;
    write_npy(o.out + "/" + id + ".prob.npy", npy_from_tensor(q));
    write_labels_png(o.out + "/" + id + ".labels.png", res.labels);
  };

  std::size_t count = 0;
  if (single) {
    std::string id = fs::path(o.prob_path).stem().string();
    if (id.size() > 5 && id.ends_with(".prob")) id.resize(id.size() - 5);
    const TensorF prob = tensor_from_npy(read_npy(o.prob_path));
    const ImageF image = read_png(o.image_path);
    PlaneF depth;
    const bool has_depth = !o.depth_path.empty();
    if (has_depth) depth = load_depth(o.depth_path);
    refine_one(id, prob, image, has_depth ? &depth : nullptr);
    count = 1;
  } else {
    const DatasetManifest m = open_manifest(o.manifest, "--manifest");
    for (const auto& e : m.entries) {
      const std::string prob_path = o.pred_dir + "/" + e.id + ".prob.npy";
      if (!fs::exists(prob_path)) fail("no probability map for sample '" + e.id + "': " + prob_path);
      const TensorF prob = tensor_from_npy(read_npy(prob_path));
      const Sample s = load_sample(m, e, 0);
      PlaneF depth;
      bool has_depth = false;
      const std::string pred_depth = o.pred_dir + "/" + e.id + ".depth.png";
      if (fs::exists(pred_depth)) {
        depth = load_depth(pred_depth);
        has_depth = true;
      } else if (s.depth) {
        depth = *s.depth;
        has_depth = true;
      }
      refine_one(e.id, prob, s.image.image, has_depth ? &depth : nullptr);
      ++count;
    }
  }
  write_result(o.out, {{"samples", count}});
  std::cout << "refined " << count << " probability maps into " << o.out << "\n";
  return 0;
}

int cmd_evaluate(Options& o, const OptionRegistry& reg) {
  need_file(o.manifest, "--manifest");
  need(o.pred_dir, "--pred");
  if (!fs::is_directory(o.pred_dir)) throw UsageError("--pred: not a directory: " + o.pred_dir);
  if (!(o.tau > 0 && o.tau < 1)) throw UsageError("--tau must lie strictly inside (0,1)");
  if (!begin_run("evaluate", o, reg)) return 0;

  const DatasetManifest m = open_manifest(o.manifest, "--manifest");
  auto guard = [](auto&& f) -> double {
    try {
      return f();
    } catch (const std::invalid_argument&) {
      return std::nan("");
    }
  };

  std::vector<eval::MetricsReport> reports;
  for (const auto& e : m.entries) {
    eval::MetricsReport r;
    r.id = e.id;
    const Sample gt = load_sample(m, e, 0);
    const int h = gt.image.height(), w = gt.image.width();

    if (gt.depth) {
      std::string dp = o.pred_dir + "/" + e.id + ".depth.png";
      if (!fs::exists(dp)) dp = o.pred_dir + "/" + e.id + ".depth.npy";
      if (fs::exists(dp)) {
        PlaneF pred = load_depth(dp);
        if (pred.rows() != h || pred.cols() != w) pred = resize_bilinear(pred, h, w);
        const PlaneF a = minmax01(pred), b = minmax01(*gt.depth);
        r.rmse = guard([&] { return eval::rmse(a, b); });
        r.corr = guard([&] { return eval::pearson_corr(a, b); });
      }
    }

    if (gt.labels) {
      const MaskPlane gt_disc = (*gt.labels >= 1), gt_cup = (*gt.labels == 2);
      eval::DiscCupMasks masks;
      bool have_masks = false;
      const std::string prob_path = o.pred_dir + "/" + e.id + ".prob.npy";
      const std::string labels_path = o.pred_dir + "/" + e.id + ".labels.png";
      if (fs::exists(prob_path)) {
        const TensorF prob = resize_prob(tensor_from_npy(read_npy(prob_path)), h, w);
        masks = eval::postprocess(prob, o.tau);
        have_masks = true;
      } else if (fs::exists(labels_path)) {
        const LabelPlane lp = resize_nearest_labels(load_labels(labels_path), h, w);
        masks.disc = (lp >= 1);
        masks.cup = (lp == 2);
        have_masks = true;
      }

      if (gt_disc.any()) r.cdr_gt = eval::vertical_cdr(gt_disc, gt_cup);
      if (have_masks) {
        r.e_disc = guard([&] { return eval::overlap_error(masks.disc, gt_disc); });
        r.e_cup = guard([&] { return eval::overlap_error(masks.cup, gt_cup); });
        r.a_disc = guard([&] { return eval::balanced_accuracy(masks.disc, gt_disc).balanced; });
        r.a_cup = guard([&] { return eval::balanced_accuracy(masks.cup, gt_cup).balanced; });
        r.d_disc = guard([&] { return eval::dice(masks.disc, gt_disc); });
        r.d_cup = guard([&] { return eval::dice(masks.cup, gt_cup); });
        if (masks.disc.any())
          r.cdr_output = eval::vertical_cdr(masks.disc, masks.cup);
        else
          r.cdr_defined = false;
        if (std::isfinite(r.cdr_output) && std::isfinite(r.cdr_gt))
          r.delta_e = std::abs(r.cdr_output - r.cdr_gt);
      }
    }
    reports.push_back(std::move(r));
  }

  // Per-sample table.
  {
    std::ofstream csv(o.out + "/metrics.csv");
    csv << "id,rmse,corr,E_disc,E_cup,A_disc,A_cup,D_disc,D_cup,"
           "CDR_output,CDR_gt,delta_E,cdr_defined,glaucoma_gt\n";
    for (const auto& r : reports) {
      csv << r.id << "," << csv_field(r.rmse) << "," << csv_field(r.corr) << ","
          << csv_field(r.e_disc) << "," << csv_field(r.e_cup) << "," << csv_field(r.a_disc) << ","
          << csv_field(r.a_cup) << "," << csv_field(r.d_disc) << "," << csv_field(r.d_cup) << ","
          << csv_field(r.cdr_output) << "," << csv_field(r.cdr_gt) << "," << csv_field(r.delta_e)
          << "," << (r.cdr_defined ? 1 : 0) << ","
          << (std::isfinite(r.cdr_gt) ? std::to_string(eval::classify_glaucoma(r.cdr_gt) ? 1 : 0)
                                      : std::string())
          << "\n";
    }
  }

  // Aggregate + ROC over samples where both CDRs exist; the screening label is
  // the ground-truth CDR passed through the 0.6 rule.
  json agg = eval::aggregate_reports(reports);
  std::vector<double> scores;
  std::vector<bool> labels;
  for (const auto& r : reports)
    if (r.cdr_defined && std::isfinite(r.cdr_output) && std::isfinite(r.cdr_gt)) {
      scores.push_back(r.cdr_output);
      labels.push_back(eval::classify_glaucoma(r.cdr_gt));
    }
  bool pos = false, neg = false;
  for (bool b : labels) (b ? pos : neg) = true;
  if (pos && neg) {
    const eval::RocResult roc = eval::roc_auc(scores, labels);
    agg["auc"] = roc.auc;
    write_roc_csv(o.out + "/roc.csv", roc.curve);
    render_roc_png(o.out + "/roc.png", roc.curve, roc.auc);
  }
  {
    std::ofstream f(o.out + "/metrics.json");
    f << agg.dump(2) << "\n";
  }
  std::cout << agg.dump(2) << "\n";
  return 0;
}

int cmd_roc_plot(Options& o, const OptionRegistry& reg) {
  need_file(o.metrics_csv, "--metrics");
  if (!begin_run("roc-plot", o, reg)) return 0;

  std::ifstream f(o.metrics_csv);
  std::string line;
  if (!std::getline(f, line)) fail("empty metrics file: " + o.metrics_csv);
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t at = 0;
    while (true) {
      const std::size_t comma = s.find(',', at);
      out.push_back(s.substr(at, comma - at));
      if (comma == std::string::npos) break;
      at = comma + 1;
    }
    return out;
  };
  const auto header = split(line);
  long score_col = -1, label_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "CDR_output") score_col = static_cast<long>(i);
    if (header[i] == "glaucoma_gt") label_col = static_cast<long>(i);
  }
  if (score_col < 0 || label_col < 0)
    fail("metrics file lacks CDR_output/glaucoma_gt columns: " + o.metrics_csv);

  std::vector<double> scores;
  std::vector<bool> labels;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto fields = split(line);
    if (fields.size() <= static_cast<std::size_t>(std::max(score_col, label_col))) continue;
    const std::string& sv = fields[score_col];
    const std::string& lv = fields[label_col];
    if (sv.empty() || lv.empty()) continue;
    scores.push_back(std::stod(sv));
    labels.push_back(lv != "0");
  }
  const eval::RocResult roc = eval::roc_auc(scores, labels);
  write_roc_csv(o.out + "/roc.csv", roc.curve);
  render_roc_png(o.out + "/roc.png", roc.curve, roc.auc);
  write_result(o.out, {{"auc", roc.auc}, {"samples", scores.size()}});
  std::cout << "auc " << fmt_double(roc.auc) << " over " << scores.size() << " samples\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Wiring
// ---------------------------------------------------------------------------

struct FlagSets {
  Options& o;
  std::map<const CLI::App*, OptionRegistry>& regs;

  OptionRegistry& common(CLI::App& cmd) {
    OptionRegistry& r = regs[&cmd];
    cmd.add_option("--config", o.config_path, "JSON config file (defaults < file < flags)");
    cmd.add_flag("--dry-run", o.dry_run, "validate the config and exit without touching anything");
    r.add(cmd, "--seed", o.seed, "RNG seed for every derived stream");
    r.add(cmd, "--out", o.out, "output directory");
    return r;
  }

  void network(CLI::App& cmd, OptionRegistry& r, bool guided) {
    r.add(cmd, "--resolution", o.resolution, "square working resolution (0 = native)");
    r.add(cmd, "--levels", o.levels, "encoder levels");
    r.add(cmd, "--base-filters", o.base_filters, "first-level filter count");
    r.add(cmd, "--max-filters", o.max_filters, "filter cap");
    r.add(cmd, "--block", o.block, "encoder block kind")
        ->check(CLI::IsMember({"residual", "dri"}));
    r.add(cmd, "--dri-rates", o.dri_rates, "dilation rates for dri blocks")->delimiter(',');
    if (guided) {
      r.add(cmd, "--guide-levels", o.guide_levels, "guide-branch encoder levels");
      r.add(cmd, "--fusion-levels", o.fusion_levels, "1-indexed guide levels that fuse")
          ->delimiter(',');
    }
  }

  void training(CLI::App& cmd, OptionRegistry& r, bool with_loss) {
    r.add(cmd, "--batch-size", o.batch_size, "samples per step");
    r.add(cmd, "--epochs", o.epochs, "epoch budget (default: pretrain 50, depth 200, seg 100)");
    r.add(cmd, "--max-steps", o.max_steps, "hard step cap (0 = none)");
    r.add(cmd, "--lr", o.lr, "Adam learning rate");
    r.add(cmd, "--patience", o.patience, "early-stop patience in epochs");
    r.add(cmd, "--augment", o.augment, "augmentation multiplier (1 = off)");
    r.add(cmd, "--val-manifest", o.val_manifest, "validation split manifest");
    if (with_loss)
      r.add(cmd, "--loss", o.loss, "regression loss")
          ->check(CLI::IsMember({"l2", "l1", "berhu"}));
  }

  void crf(CLI::App& cmd, OptionRegistry& r) {
    r.add(cmd, "--w1", o.w1, "appearance kernel weight");
    r.add(cmd, "--w2", o.w2, "depth kernel weight (0 without depth)");
    r.add(cmd, "--w3", o.w3, "smoothness kernel weight");
    r.add(cmd, "--theta-alpha", o.theta_alpha, "position bandwidth (pixels)");
    r.add(cmd, "--theta-beta", o.theta_beta, "color bandwidth (0-255 intensity)");
    r.add(cmd, "--theta-gamma", o.theta_gamma, "depth bandwidth");
    r.add(cmd, "--iters", o.iters, "mean-field iterations");
    r.add(cmd, "--engine", o.engine, "message-passing engine")
        ->check(CLI::IsMember({"exact", "fast", "automatic"}));
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retinal fundus depth estimation and optic disc/cup segmentation toolkit"};
  app.require_subcommand(1);
  Options o;
  std::map<const CLI::App*, OptionRegistry> regs;
  FlagSets fl{o, regs};

  {
    CLI::App& c = *app.add_subcommand("pseudo-depth", "export pseudo-depth maps and vessel masks");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--manifest", o.manifest, "dataset manifest");
    r.add(c, "--resolution", o.resolution, "square working resolution (0 = native)");
  }
  {
    CLI::App& c = *app.add_subcommand("pretrain", "reconstruction pretraining for the depth net");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--manifest", o.manifest, "dataset manifest");
    r.add(c, "--target", o.target, "reconstruction target")
        ->check(CLI::IsMember({"pseudo_depth", "denoise"}));
    r.add(c, "--noise-sigma", o.noise_sigma, "input noise for the denoise target");
    fl.network(c, r, false);
    fl.training(c, r, true);
  }
  {
    CLI::App& c = *app.add_subcommand("train-depth", "train the depth estimation network");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--manifest", o.manifest, "dataset manifest with depth targets");
    r.add(c, "--pretrain", o.pretrain, "chained pretraining phase")
        ->check(CLI::IsMember({"none", "pseudo_depth", "denoise"}));
    r.add(c, "--pretrain-epochs", o.pretrain_epochs, "epoch budget for the pretraining phase");
    r.add(c, "--pretrain-steps", o.pretrain_steps, "step cap for the pretraining phase (0 = none)");
    r.add(c, "--noise-sigma", o.noise_sigma, "input noise for denoise pretraining");
    r.add(c, "--init", o.init_checkpoint, "checkpoint to warm-start from");
    fl.network(c, r, false);
    fl.training(c, r, true);
  }
  {
    CLI::App& c = *app.add_subcommand("train-seg", "train the disc/cup segmentation network");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--manifest", o.manifest, "dataset manifest with labels");
    r.add(c, "--guide", o.guide, "guide signal for the fused second branch")
        ->check(CLI::IsMember({"none", "depth", "pseudo_depth"}));
    r.add(c, "--depth-checkpoint", o.depth_checkpoint, "depth net producing --guide depth");
    r.add(c, "--init", o.init_checkpoint, "checkpoint to warm-start from (fine-tuning)");
    fl.network(c, r, true);
    fl.training(c, r, false);
  }
  {
    CLI::App& c = *app.add_subcommand("infer-depth", "depth maps from a trained checkpoint");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--manifest", o.manifest, "dataset manifest");
    r.add(c, "--checkpoint", o.checkpoint, "trained depth checkpoint");
  }
  {
    CLI::App& c = *app.add_subcommand("infer-seg", "disc/cup probability maps and labelings");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--manifest", o.manifest, "dataset manifest");
    r.add(c, "--checkpoint", o.checkpoint, "trained segmentation checkpoint");
    r.add(c, "--depth-checkpoint", o.depth_checkpoint, "depth net for depth-guided checkpoints");
    r.add_flag(c, "--crf", o.crf, "refine probabilities with the dense CRF");
    fl.crf(c, r);
  }
  {
    CLI::App& c = *app.add_subcommand("crf-refine", "dense-CRF refinement of probability maps");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--manifest", o.manifest, "dataset manifest (batch mode)");
    r.add(c, "--pred", o.pred_dir, "prediction directory with <id>.prob.npy (batch mode)");
    r.add(c, "--image", o.image_path, "single RGB image (single mode)");
    r.add(c, "--prob", o.prob_path, "single probability .npy (single mode)");
    r.add(c, "--depth", o.depth_path, "single depth map (single mode)");
    fl.crf(c, r);
  }
  {
    CLI::App& c = *app.add_subcommand("evaluate", "score predictions against ground truth");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--manifest", o.manifest, "ground-truth manifest");
    r.add(c, "--pred", o.pred_dir, "prediction directory");
    r.add(c, "--tau", o.tau, "probability threshold for disc/cup masks");
  }
  {
    CLI::App& c = *app.add_subcommand("roc-plot", "ROC curve from an evaluation metrics table");
    OptionRegistry& r = fl.common(c);
    r.add(c, "--metrics", o.metrics_csv, "metrics.csv produced by evaluate");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  OptionRegistry& reg = regs.at(sub);
  try {
    if (!o.config_path.empty()) {
      if (!fs::exists(o.config_path))
        throw UsageError("config file not found: " + o.config_path);
      std::ifstream f(o.config_path);
      json cfg;
      try {
        cfg = json::parse(f);
      } catch (const json::parse_error& e) {
        throw UsageError(std::string("config file is not valid JSON: ") + e.what());
      }
      reg.apply_file(cfg);
    }
    need(o.out, "--out");

    const std::string name = sub->get_name();
    if (name == "pseudo-depth") return cmd_pseudo_depth(o, reg);
    if (name == "pretrain") return cmd_pretrain(o, reg);
    if (name == "train-depth") return cmd_train_depth(o, reg);
    if (name == "train-seg") return cmd_train_seg(o, reg);
    if (name == "infer-depth") return cmd_infer_depth(o, reg);
    if (name == "infer-seg") return cmd_infer_seg(o, reg);
    if (name == "crf-refine") return cmd_crf_refine(o, reg);
    if (name == "evaluate") return cmd_evaluate(o, reg);
    if (name == "roc-plot") return cmd_roc_plot(o, reg);
    fail("unreachable subcommand: " + name);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
