// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dig/tensor.hpp"

namespace dig {

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are little-endian; byte-swapping is not implemented");

// ============================================================================
// Tensor blob: one JSON header line, then raw little-endian f64 data.
// ============================================================================

inline void save_tensor(std::ostream& os, const Tensor& t) {
  nlohmann::json header;
  header["dtype"] = "f64";
  header["shape"] = t.shape();
  os << header.dump() << "\n";
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.numel())));
}

inline Tensor load_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("missing tensor header");
  auto header = nlohmann::json::parse(line);
  if (header.value("dtype", "") != "f64") throw IoError("unsupported tensor dtype");
  std::vector<std::int64_t> shape = header.at("shape").get<std::vector<std::int64_t>>();
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.mutable_data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.numel())));
  if (!is) throw IoError("truncated tensor payload");
  return t;
}

inline void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  save_tensor(os, t);
}

inline Tensor load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return load_tensor(is);
}

// ============================================================================
// Checkpoint: magic line, JSON manifest (config + tensor directory), blobs.
// ============================================================================

inline constexpr const char* kCheckpointMagic = "DIGCKPT1";

struct Checkpoint {
  nlohmann::json config;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const std::string& path, const nlohmann::json& config, std::int64_t step,
                            const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  nlohmann::json manifest;
  manifest["config"] = config;
  manifest["step"] = step;
  auto& dir = manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape();
    dir.push_back(e);
  }
  os << kCheckpointMagic << "\n" << manifest.dump() << "\n";
  for (const auto& [name, t] : tensors)
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.numel())));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::string magic, manifest_line;
  if (!std::getline(is, magic) || magic != kCheckpointMagic) throw IoError("not a checkpoint file");
  if (!std::getline(is, manifest_line)) throw IoError("missing checkpoint manifest");
  auto manifest = nlohmann::json::parse(manifest_line);
  Checkpoint ck;
  ck.config = manifest.at("config");
  ck.step = manifest.value("step", std::int64_t{0});
  for (const auto& e : manifest.at("tensors")) {
    std::vector<std::int64_t> shape = e.at("shape").get<std::vector<std::int64_t>>();
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.mutable_data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.numel())));
    if (!is) throw IoError("truncated checkpoint payload");
    ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

}  // namespace dig
