#include "fundus/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace fundus {

namespace fs = std::filesystem;

std::string resolve_path(const std::string& base_dir, const std::string& rel) {
  fs::path p(rel);
  if (p.is_absolute() || base_dir.empty()) return rel;
  return (fs::path(base_dir) / p).string();
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("cannot open manifest: " + path);
  DatasetManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ss(line);
    std::string tok;
    ManifestEntry e;
    bool any = false;
    while (ss >> tok) {
      auto eq = tok.find('=');
      require(eq != std::string::npos,
              "manifest " + path + ":" + std::to_string(lineno) + ": expected key=value, got '" +
                  tok + "'");
      std::string key = tok.substr(0, eq);
      std::string val = tok.substr(eq + 1);
      any = true;
      if (key == "id") {
        e.id = val;
      } else if (key == "image") {
        e.image_path = val;
      } else if (key == "depth") {
        e.depth_path = val;
      } else if (key == "label") {
        e.label_path = val;
      } else if (key == "roi") {
        RoiBox box;
        if (std::sscanf(val.c_str(), "%d,%d,%d", &box.center_x, &box.center_y, &box.side) != 3)
          fail("manifest " + path + ":" + std::to_string(lineno) + ": bad roi '" + val + "'");
        e.roi = box;
      } else {
        fail("manifest " + path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
    }
    if (!any) continue;
    require(!e.image_path.empty(),
            "manifest " + path + ":" + std::to_string(lineno) + ": missing image=");
    if (e.id.empty()) e.id = fs::path(e.image_path).stem().string();
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream f(path);
  if (!f) fail("cannot write manifest: " + path);
  for (const auto& e : m.entries) {
    f << "id=" << e.id << " image=" << e.image_path;
    if (e.depth_path) f << " depth=" << *e.depth_path;
    if (e.label_path) f << " label=" << *e.label_path;
    if (e.roi) f << " roi=" << e.roi->center_x << ',' << e.roi->center_y << ',' << e.roi->side;
    f << '\n';
  }
}

}  // namespace fundus
