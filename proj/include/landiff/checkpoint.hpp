#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "landiff/common.hpp"
#include "landiff/tensor.hpp"

namespace landiff {

// Checkpoint archive: magic "LDF1", u32 version, u64 manifest length, JSON
// manifest, then the raw little-endian f64 buffers back to back. Values are
// always stored as f64 regardless of the build's scalar type.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> meta;

  const Tensor& require(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw io_error("checkpoint: missing tensor " + name);
    return it->second;
  }

  const std::string& meta_str(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw io_error("checkpoint: missing meta key " + key);
    return it->second;
  }
  int64_t meta_i64(const std::string& key) const { return std::stoll(meta_str(key)); }
  double meta_f64(const std::string& key) const { return std::stod(meta_str(key)); }
  bool meta_bool(const std::string& key) const { return meta_str(key) == "1"; }
};

inline void meta_set(std::map<std::string, std::string>& meta, const std::string& key,
                     int64_t v) {
  meta[key] = std::to_string(v);
}
inline void meta_set(std::map<std::string, std::string>& meta, const std::string& key, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  meta[key] = buf;
}
inline void meta_set(std::map<std::string, std::string>& meta, const std::string& key, bool v) {
  meta[key] = v ? "1" : "0";
}
inline void meta_set(std::map<std::string, std::string>& meta, const std::string& key,
                     const std::string& v) {
  meta[key] = v;
}

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& tensors,
                            const std::map<std::string, std::string>& meta = {}) {
  nlohmann::json manifest;
  manifest["meta"] = meta;
  nlohmann::json entries = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["dtype"] = "f64";
    e["shape"] = t.shape;
    e["offset"] = offset;
    e["bytes"] = uint64_t(t.numel()) * sizeof(double);
    entries.push_back(e);
    offset += uint64_t(t.numel()) * sizeof(double);
  }
  manifest["tensors"] = entries;
  const std::string mstr = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  os.write("LDF1", 4);
  const uint32_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), 4);
  const uint64_t mlen = mstr.size();
  os.write(reinterpret_cast<const char*>(&mlen), 8);
  os.write(mstr.data(), std::streamsize(mstr.size()));
  for (const auto& [name, t] : tensors) {
    for (real v : *t.data) {
      const double d = double(v);
      os.write(reinterpret_cast<const char*>(&d), 8);
    }
  }
  if (!os) throw io_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "LDF1") throw io_error("not a checkpoint file: " + path);
  uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  if (!is || version != 1) throw io_error("unsupported checkpoint version");
  uint64_t mlen = 0;
  is.read(reinterpret_cast<char*>(&mlen), 8);
  if (!is || mlen > (uint64_t(1) << 30)) throw io_error("checkpoint: bad manifest length");
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), std::streamsize(mlen));
  if (!is) throw io_error("checkpoint: truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mstr);
  } catch (const std::exception& e) {
    throw io_error(std::string("checkpoint: manifest parse error: ") + e.what());
  }

  Checkpoint ck;
  if (manifest.contains("meta"))
    for (auto& [k, v] : manifest["meta"].items()) ck.meta[k] = v.get<std::string>();

  const std::streampos payload_start = is.tellg();
  for (const auto& e : manifest["tensors"]) {
    const std::string name = e["name"].get<std::string>();
    if (e["dtype"].get<std::string>() != "f64") throw io_error("checkpoint: unsupported dtype");
    Shape shape = e["shape"].get<Shape>();
    const uint64_t offset = e["offset"].get<uint64_t>();
    const uint64_t bytes = e["bytes"].get<uint64_t>();
    if (bytes != uint64_t(shape_numel(shape)) * sizeof(double))
      throw io_error("checkpoint: byte count does not match shape for " + name);
    Tensor t = zeros(shape);
    is.seekg(payload_start + std::streampos(offset));
    for (auto& v : *t.data) {
      double d = 0;
      is.read(reinterpret_cast<char*>(&d), 8);
      v = real(d);
    }
    if (!is) throw io_error("checkpoint: truncated payload for " + name);
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

}  // namespace landiff
