#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fundus {

template <typename S>
using Plane = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>;  // (row, col) = (y, x)

using PlaneF = Plane<float>;
using PlaneD = Plane<double>;
using MaskPlane = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using LabelPlane = Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Deterministic 64-bit stream mixer for deriving independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(seed, a), b);
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace fundus
