#include "fundus/npy.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fundus {

namespace {
constexpr char kMagic[] = "\x93NUMPY";
}

NpyArray read_npy(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open npy: " + path);
  char magic[6];
  f.read(magic, 6);
  if (std::memcmp(magic, kMagic, 6) != 0) fail("not an npy file: " + path);
  uint8_t ver[2];
  f.read(reinterpret_cast<char*>(ver), 2);
  uint32_t hlen = 0;
  if (ver[0] == 1) {
    uint16_t h16;
    f.read(reinterpret_cast<char*>(&h16), 2);
    hlen = h16;
  } else {
    f.read(reinterpret_cast<char*>(&hlen), 4);
  }
  std::string header(hlen, '\0');
  f.read(header.data(), hlen);

  if (header.find("'<f4'") == std::string::npos && header.find("\"<f4\"") == std::string::npos)
    fail("npy: only little-endian float32 supported: " + path);
  if (header.find("'fortran_order': True") != std::string::npos)
    fail("npy: fortran order not supported: " + path);

  auto sp = header.find("'shape':");
  if (sp == std::string::npos) fail("npy: missing shape: " + path);
  auto open = header.find('(', sp);
  auto close = header.find(')', open);
  std::string inner = header.substr(open + 1, close - open - 1);
  NpyArray arr;
  std::stringstream ss(inner);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::string t;
    for (char c : tok)
      if (!std::isspace(static_cast<unsigned char>(c))) t += c;
    if (!t.empty()) arr.shape.push_back(std::stoul(t));
  }
  arr.data.resize(arr.size());
  f.read(reinterpret_cast<char*>(arr.data.data()), arr.size() * sizeof(float));
  if (!f) fail("npy: truncated data: " + path);
  return arr;
}

void write_npy(const std::string& path, const NpyArray& arr) {
  std::ostringstream shape;
  shape << "(";
  for (std::size_t i = 0; i < arr.shape.size(); ++i) shape << arr.shape[i] << ", ";
  shape << ")";
  std::string dict =
      "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape.str() + ", }";
  std::size_t unpadded = 6 + 2 + 2 + dict.size() + 1;
  std::size_t pad = (64 - unpadded % 64) % 64;
  dict += std::string(pad, ' ');
  dict += '\n';

  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot write npy: " + path);
  f.write(kMagic, 6);
  const uint8_t ver[2] = {1, 0};
  f.write(reinterpret_cast<const char*>(ver), 2);
  const uint16_t hlen = static_cast<uint16_t>(dict.size());
  f.write(reinterpret_cast<const char*>(&hlen), 2);
  f.write(dict.data(), dict.size());
  f.write(reinterpret_cast<const char*>(arr.data.data()), arr.data.size() * sizeof(float));
  if (!f) fail("npy: write failed: " + path);
}

NpyArray npy_from_plane(const PlaneF& p) {
  NpyArray a;
  a.shape = {static_cast<std::size_t>(p.rows()), static_cast<std::size_t>(p.cols())};
  a.data.resize(a.size());
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < p.cols(); ++x)
      a.data[static_cast<std::size_t>(y) * p.cols() + x] = p(y, x);
  return a;
}

PlaneF plane_from_npy(const NpyArray& a) {
  require(a.shape.size() == 2, "npy: expected a 2-d array");
  PlaneF p(static_cast<Eigen::Index>(a.shape[0]), static_cast<Eigen::Index>(a.shape[1]));
  for (Eigen::Index y = 0; y < p.rows(); ++y)
    for (Eigen::Index x = 0; x < p.cols(); ++x)
      p(y, x) = a.data[static_cast<std::size_t>(y) * p.cols() + x];
  return p;
}

}  // namespace fundus
