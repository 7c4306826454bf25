#pragma once

#include "fundus/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

// vendored single-header nlohmann/json
#include "json.hpp"

namespace fundus {

/// Self-describing binary checkpoint container: versioned header, a JSON
/// metadata block (configs, step counters, optimizer scalars), and named
/// float32 tensors.
struct CheckpointFile {
  nlohmann::json meta;
  std::vector<std::pair<std::string, TensorF>> tensors;

  const TensorF* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

/// Writes atomically (temp file + rename).
void save_checkpoint(const std::string& path, const CheckpointFile& ckpt);
CheckpointFile load_checkpoint(const std::string& path);

}  // namespace fundus
