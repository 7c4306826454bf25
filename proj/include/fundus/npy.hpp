#pragma once

#include "fundus/common.hpp"

#include <string>
#include <vector>

namespace fundus {

/// Minimal NPY (format 1.0) support for little-endian float32 arrays in C
/// order. Used as the portable float container for depth and probability
/// maps.
struct NpyArray {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  std::size_t size() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

NpyArray read_npy(const std::string& path);
void write_npy(const std::string& path, const NpyArray& arr);

NpyArray npy_from_plane(const PlaneF& p);
PlaneF plane_from_npy(const NpyArray& a);

}  // namespace fundus
