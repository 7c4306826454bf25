#include "fundus/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace fundus {

namespace {
constexpr char kMagic[8] = {'F', 'N', 'D', 'S', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const CheckpointFile& ckpt) {
  nlohmann::json header;
  header["format_version"] = kVersion;
  header["meta"] = ckpt.meta;
  auto& tens = header["tensors"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const uint64_t nbytes = static_cast<uint64_t>(t.size()) * sizeof(float);
    tens.push_back({{"name", name},
                    {"n", t.n},
                    {"c", t.c},
                    {"h", t.h},
                    {"w", t.w},
                    {"offset", offset},
                    {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string hs = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail("cannot write checkpoint: " + tmp);
    f.write(kMagic, sizeof(kMagic));
    const uint32_t ver = kVersion;
    const uint32_t hlen = static_cast<uint32_t>(hs.size());
    f.write(reinterpret_cast<const char*>(&ver), 4);
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(hs.data(), hs.size());
    for (const auto& [name, t] : ckpt.tensors)
      f.write(reinterpret_cast<const char*>(t.m.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!f) fail("checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) fail("not a checkpoint file: " + path);
  uint32_t ver = 0, hlen = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  f.read(reinterpret_cast<char*>(&hlen), 4);
  if (ver != kVersion)
    fail("unsupported checkpoint version " + std::to_string(ver) + ": " + path);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  nlohmann::json header = nlohmann::json::parse(hs);

  CheckpointFile ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  const std::streampos payload_start = f.tellg();
  for (const auto& jt : header.at("tensors")) {
    TensorF t(jt.at("n").get<int>(), jt.at("c").get<int>(), jt.at("h").get<int>(),
              jt.at("w").get<int>());
    f.seekg(payload_start + static_cast<std::streamoff>(jt.at("offset").get<uint64_t>()));
    f.read(reinterpret_cast<char*>(t.m.data()),
           static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!f) fail("checkpoint truncated: " + path);
    ckpt.tensors.emplace_back(jt.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

}  // namespace fundus
