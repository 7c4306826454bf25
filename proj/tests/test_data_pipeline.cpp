#include "fundus/data_pipeline.hpp"

#include "support/testing.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

using namespace fundus;

namespace {

FundusImage indexed_image(int h, int w) {
  FundusImage img;
  img.source_id = "probe";
  img.image = ImageF(3, h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.image.planes[c](y, x) = static_cast<float>(c * 1000000 + y * 1000 + x);
  return img;
}

FundusImage random_image(int h, int w, std::uint64_t seed) {
  FundusImage img;
  img.image = ImageF(3, h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.05f, 0.95f);
  for (auto& p : img.image.planes)
    for (Eigen::Index y = 0; y < p.rows(); ++y)
      for (Eigen::Index x = 0; x < p.cols(); ++x) p(y, x) = u(rng);
  return img;
}

std::vector<std::string> numbered_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("s" + std::to_string(1000 + i));
  return ids;
}

}  // namespace

TEST_CASE("roi crop lifts the exact pixel block") {
  FundusImage img = indexed_image(512, 512);
  FundusImage out = crop_roi(img, RoiBox{256, 256, 256});
  REQUIRE(out.height() == 256);
  REQUIRE(out.width() == 256);
  CHECK(out.source_id == "probe");
  // origin = center - side/2 = (128,128)
  CHECK(out.image.planes[0](0, 0) == img.image.planes[0](128, 128));
  CHECK(out.image.planes[2](255, 255) == img.image.planes[2](383, 383));
  CHECK(out.image.planes[1](100, 7) == img.image.planes[1](228, 135));
}

TEST_CASE("roi crop rejects boxes leaving the image") {
  FundusImage img = indexed_image(64, 64);
  CHECK_THROWS(crop_roi(img, RoiBox{10, 32, 32}));    // runs off the left
  CHECK_THROWS(crop_roi(img, RoiBox{32, 60, 32}));    // runs off the bottom
  CHECK_THROWS(crop_roi(img, RoiBox{32, 32, 0}));     // degenerate side
  CHECK_NOTHROW(crop_roi(img, RoiBox{32, 32, 64}));   // exactly fits
}

TEST_CASE("normalization lands each channel on the canonical statistics") {
  FundusImage img = random_image(48, 48, 11);
  CanonicalStats canon;
  canon.mean = {0.5, 0.4, 0.6};
  canon.stddev = {0.2, 0.1, 0.15};
  FundusImage out = normalize_to_canonical(img, canon);
  CHECK(out.normalized);
  for (int c = 0; c < 3; ++c) {
    double mean, sd;
    plane_mean_std(out.image.planes[c], mean, sd);
    CHECK(mean == doctest::Approx(canon.mean[c]).epsilon(1e-4));
    CHECK(sd == doctest::Approx(canon.stddev[c]).epsilon(1e-4));
  }
}

TEST_CASE("normalization is a fixed point once applied") {
  FundusImage img = random_image(32, 32, 3);
  CanonicalStats canon;
  canon.mean = {0.5, 0.5, 0.5};
  canon.stddev = {0.25, 0.25, 0.25};
  FundusImage once = normalize_to_canonical(img, canon);
  FundusImage twice = normalize_to_canonical(once, canon);
  for (int c = 0; c < 3; ++c)
    CHECK((once.image.planes[c] - twice.image.planes[c]).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("normalization refuses a flat channel") {
  FundusImage img = random_image(16, 16, 4);
  img.image.planes[1].setConstant(0.3f);
  CanonicalStats canon;
  canon.mean = {0.5, 0.5, 0.5};
  canon.stddev = {0.2, 0.2, 0.2};
  CHECK_THROWS_WITH_AS(normalize_to_canonical(img, canon),
                       doctest::Contains("zero-variance channel 1"), std::runtime_error);
  canon.stddev[0] = 0.0;
  CHECK_THROWS(canonical_stats_of(img.image));  // invalid target stats are caught too
}

TEST_CASE("canonical stats of a normalized image match the target") {
  FundusImage img = random_image(40, 40, 8);
  CanonicalStats canon;
  canon.mean = {0.45, 0.5, 0.55};
  canon.stddev = {0.1, 0.12, 0.14};
  CanonicalStats got = canonical_stats_of(normalize_to_canonical(img, canon).image);
  for (int c = 0; c < 3; ++c) {
    CHECK(got.mean[c] == doctest::Approx(canon.mean[c]).epsilon(1e-4));
    CHECK(got.stddev[c] == doctest::Approx(canon.stddev[c]).epsilon(1e-4));
  }
}

TEST_CASE("augmentation yields exactly the multiplier with the original first") {
  Sample s;
  s.image = random_image(24, 24, 5);
  s.depth = s.image.image.planes[1];  // tie depth to green to watch coupling
  AugmentPolicy policy;
  policy.noise_sigma_max = 0.0;
  auto out = augment(s, policy, 77);
  REQUIRE(static_cast<int>(out.size()) == policy.multiplier);
  for (int c = 0; c < 3; ++c)
    CHECK((out[0].image.image.planes[c] - s.image.image.planes[c]).matrix().norm() == 0.0f);
  CHECK((*out[0].depth - *s.depth).matrix().norm() == 0.0f);
}

TEST_CASE("geometric transforms hit image and targets in lockstep") {
  Sample s;
  s.image = random_image(24, 24, 6);
  s.depth = s.image.image.planes[1];
  AugmentPolicy policy;
  policy.noise_sigma_max = 0.0;  // isolate geometry
  auto out = augment(s, policy, 9);
  bool some_variant_moved = false;
  for (const auto& v : out) {
    // depth rode along with the green channel through flip+zoom
    CHECK((*v.depth - v.image.image.planes[1]).cwiseAbs().maxCoeff() == 0.0f);
    if ((*v.depth - *s.depth).matrix().norm() > 0) some_variant_moved = true;
  }
  CHECK(some_variant_moved);
}

TEST_CASE("noise perturbs the image but never the targets") {
  Sample s;
  s.image.image = ImageF(3, 16, 16);
  for (auto& p : s.image.image.planes) p.setConstant(0.5f);
  s.depth = PlaneF::Constant(16, 16, 0.5f);
  LabelPlane lp = LabelPlane::Zero(16, 16);
  lp.block(4, 4, 8, 8).setConstant(2);
  s.labels = lp;
  AugmentPolicy policy;  // noise_sigma_max = 0.05
  auto out = augment(s, policy, 123);
  bool noisy = false;
  for (std::size_t k = 1; k < out.size(); ++k) {
    const auto& v = out[k];
    // geometry of a constant plane is constant; any wiggle is injected noise
    if ((v.image.image.planes[0].array() != 0.5f).any()) noisy = true;
    CHECK((v.depth->array() == 0.5f).all());
    std::set<int> classes;
    for (Eigen::Index y = 0; y < v.labels->rows(); ++y)
      for (Eigen::Index x = 0; x < v.labels->cols(); ++x) classes.insert((*v.labels)(y, x));
    for (int c : classes) CHECK((c == 0 || c == 2));  // nearest never invents classes
  }
  CHECK(noisy);
}

TEST_CASE("augmentation is reproducible and rejects bad multipliers") {
  Sample s;
  s.image = random_image(20, 20, 2);
  AugmentPolicy policy;
  auto a = augment(s, policy, 31);
  auto b = augment(s, policy, 31);
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k)
    for (int c = 0; c < 3; ++c)
      CHECK((a[k].image.image.planes[c] - b[k].image.image.planes[c]).matrix().norm() == 0.0f);
  policy.multiplier = 0;
  CHECK_THROWS(augment(s, policy, 31));
}

TEST_CASE("unit zoom is the identity") {
  PlaneF p = PlaneF::Random(17, 17);
  PlaneF z = detail::zoom_plane<float>(p, 1.0, false, true);
  CHECK((z - p).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("zoom keeps a constant plane constant") {
  PlaneF p = PlaneF::Constant(16, 16, 0.7f);
  for (double z : {0.9, 1.05, 1.1}) {
    PlaneF out = detail::zoom_plane<float>(p, z, false, true);
    REQUIRE(out.rows() == 16);
    CHECK((out.array() - 0.7f).abs().maxCoeff() < 1e-6f);
  }
}

TEST_CASE("five-fold split of 30 ids gives six per fold, disjoint and total") {
  SplitSpec spec = make_splits(numbered_ids(30), SplitMode::k_fold, 5, 99);
  REQUIRE(spec.fold_count == 5);
  std::set<std::string> seen;
  for (int f = 0; f < 5; ++f) {
    auto fold = spec.ids_in_fold(f);
    CHECK(fold.size() == 6);
    seen.insert(fold.begin(), fold.end());
    CHECK(spec.ids_not_in_fold(f).size() == 24);
  }
  CHECK(seen.size() == 30);
}

TEST_CASE("half split divides 650 ids into 325/325") {
  SplitSpec spec = make_splits(numbered_ids(650), SplitMode::half, 7 /* ignored */, 1);
  CHECK(spec.fold_count == 2);
  CHECK(spec.ids_in_fold(0).size() == 325);
  CHECK(spec.ids_in_fold(1).size() == 325);
}

TEST_CASE("splits reject undersized or duplicated inputs") {
  CHECK_THROWS(make_splits(numbered_ids(4), SplitMode::k_fold, 5, 1));
  auto ids = numbered_ids(10);
  ids[3] = ids[7];
  CHECK_THROWS(make_splits(ids, SplitMode::k_fold, 5, 1));
}

TEST_CASE("split assignment depends on the seed only") {
  auto a = make_splits(numbered_ids(30), SplitMode::k_fold, 5, 7);
  auto b = make_splits(numbered_ids(30), SplitMode::k_fold, 5, 7);
  auto c = make_splits(numbered_ids(30), SplitMode::k_fold, 5, 8);
  CHECK(a.fold_assignments == b.fold_assignments);
  CHECK(a.fold_assignments != c.fold_assignments);
  // input order must not matter
  auto ids = numbered_ids(30);
  std::reverse(ids.begin(), ids.end());
  auto d = make_splits(ids, SplitMode::k_fold, 5, 7);
  CHECK(a.fold_assignments == d.fold_assignments);
}

TEST_CASE("manifest roundtrip and sample loading with roi and resize") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "pipeline_io_test";
  fs::create_directories(dir);

  FundusImage img = random_image(64, 64, 13);
  write_png8((dir / "img.png").string(), img.image);

  PlaneF depth(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) depth(y, x) = (y * 64 + x) / 4096.0f;
  write_npy((dir / "depth.npy").string(), npy_from_plane(depth));

  ImageF label_img(1, 64, 64);
  for (int y = 24; y < 40; ++y)
    for (int x = 24; x < 40; ++x) label_img.planes[0](y, x) = 1.0f / 255.0f;
  for (int y = 28; y < 36; ++y)
    for (int x = 28; x < 36; ++x) label_img.planes[0](y, x) = 2.0f / 255.0f;
  write_png8((dir / "labels.png").string(), label_img);

  DatasetManifest m;
  m.base_dir = dir.string();
  ManifestEntry e;
  e.id = "case01";
  e.image_path = "img.png";
  e.depth_path = "depth.npy";
  e.label_path = "labels.png";
  e.roi = RoiBox{32, 32, 32};
  m.entries.push_back(e);
  write_manifest((dir / "manifest.txt").string(), m);

  DatasetManifest back = read_manifest((dir / "manifest.txt").string());
  REQUIRE(back.entries.size() == 1);
  CHECK(back.entries[0].id == "case01");
  REQUIRE(back.entries[0].roi.has_value());
  CHECK(back.entries[0].roi->side == 32);

  Sample s = load_sample(back, back.entries[0], 16);
  CHECK(s.image.source_id == "case01");
  CHECK(s.image.height() == 16);
  REQUIRE(s.depth.has_value());
  CHECK(s.depth->rows() == 16);
  // crop is [16,48)^2, then 32->16 bilinear; out (8,8) samples full-frame
  // pixels (32..33, 32..33) with equal weights
  const float expected =
      (depth(32, 32) + depth(32, 33) + depth(33, 32) + depth(33, 33)) / 4.0f;
  CHECK((*s.depth)(8, 8) == doctest::Approx(expected).epsilon(1e-5));
  REQUIRE(s.labels.has_value());
  // class 2 sits at [12,20)^2 of the crop = rows 6..9 after nearest 32->16
  CHECK((*s.labels)(8, 8) == 2);
  CHECK((*s.labels)(1, 1) == 0);
  CHECK((*s.labels)(4, 8) == 1);
  fs::remove_all(dir);
}

TEST_CASE("depth loads identically from png16 and npy") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "depth_io_test";
  fs::create_directories(dir);
  PlaneF depth(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) depth(y, x) = (y * 16 + x) / 256.0f;
  write_png16((dir / "d.png").string(), depth);
  write_npy((dir / "d.npy").string(), npy_from_plane(depth));
  PlaneF from_png = load_depth((dir / "d.png").string());
  PlaneF from_npy = load_depth((dir / "d.npy").string());
  CHECK((from_npy - depth).cwiseAbs().maxCoeff() == 0.0f);            // float32 exact
  CHECK((from_png - depth).cwiseAbs().maxCoeff() < 1.0f / 65535.0f);  // 16-bit quantized
  fs::remove_all(dir);
}
