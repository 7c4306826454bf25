#pragma once

#include "fundus/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fundus {

struct RoiBox {
  int center_x = 0;
  int center_y = 0;
  int side = 0;
};

/// One dataset sample: paths are resolved relative to the manifest location.
struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::optional<std::string> depth_path;
  std::optional<std::string> label_path;
  std::optional<RoiBox> roi;
};

struct DatasetManifest {
  std::string base_dir;
  std::vector<ManifestEntry> entries;
};

/// Parses the line-based manifest format: one sample per line, tokens of the
/// form key=value with keys {id, image, depth, label, roi}; roi is
/// "cx,cy,side". Blank lines and `#` comments are skipped.
DatasetManifest read_manifest(const std::string& path);

void write_manifest(const std::string& path, const DatasetManifest& m);

/// Joins base_dir and a possibly relative path.
std::string resolve_path(const std::string& base_dir, const std::string& rel);

}  // namespace fundus
