#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "utnet/tensor.hpp"

namespace utnet {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts unsupported");

namespace fs = std::filesystem;
using json = nlohmann::json;

// One tensor on disk is a pair of files:
//   <name>.bin   raw f64 values, row-major, little-endian
//   <name>.json  {"name": ..., "dtype": "f64", "shape": [...]}
inline void save_tensor(const fs::path& dir, const std::string& name,
                        const Tensor& t) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / (name + ".bin"), std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("save_tensor: cannot open " + (dir / name).string());
    out.write(reinterpret_cast<const char*>(t.ptr()),
              std::streamsize(t.numel() * sizeof(double)));
    if (!out) throw DataError("save_tensor: short write for " + name);
  }
  json meta;
  meta["name"] = name;
  meta["dtype"] = "f64";
  meta["shape"] = t.shape;
  std::ofstream out(dir / (name + ".json"), std::ios::trunc);
  if (!out) throw DataError("save_tensor: cannot open sidecar for " + name);
  out << meta.dump(2) << "\n";
}

inline Tensor load_tensor(const fs::path& dir, const std::string& name) {
  const fs::path meta_path = dir / (name + ".json");
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("load_tensor: missing sidecar " + meta_path.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw DataError("load_tensor: bad sidecar " + meta_path.string() + ": " +
                    e.what());
  }
  if (!meta.contains("dtype") || meta["dtype"] != "f64")
    throw DataError("load_tensor: " + name + " is not an f64 tensor");
  if (!meta.contains("shape") || !meta["shape"].is_array())
    throw DataError("load_tensor: " + name + " sidecar lacks a shape");
  Shape shape = meta["shape"].get<Shape>();
  for (int d : shape)
    if (d <= 0) throw DataError("load_tensor: " + name + " has bad shape");

  const fs::path bin_path = dir / (name + ".bin");
  std::ifstream in(bin_path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("load_tensor: missing " + bin_path.string());
  const auto bytes = int64_t(in.tellg());
  if (bytes != numel(shape) * int64_t(sizeof(double)))
    throw DataError("load_tensor: " + name + " has " + std::to_string(bytes) +
                    " bytes but shape " + shape_str(shape) + " needs " +
                    std::to_string(numel(shape) * int64_t(sizeof(double))));
  in.seekg(0);
  Tensor t = Tensor::zeros(shape);
  in.read(reinterpret_cast<char*>(t.ptr()), std::streamsize(bytes));
  if (!in) throw DataError("load_tensor: short read for " + name);
  return t;
}

// Small helpers shared by checkpoint / manifest writers.
inline void save_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("save_json: cannot open " + path.string());
  out << j.dump(2) << "\n";
}

inline json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_json: missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("load_json: bad JSON in " + path.string() + ": " + e.what());
  }
}

inline void save_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("save_text: cannot open " + path.string());
  out << text;
}

inline std::string load_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_text: missing " + path.string());
  std::string s((std::istreambuf_iterator<char>(in)),
                std::istreambuf_iterator<char>());
  return s;
}

}  // namespace utnet
