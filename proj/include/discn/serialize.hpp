#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "discn/tensor.hpp"

namespace discn {

static_assert(std::endian::native == std::endian::little,
              "DSCN-T1 payloads are little-endian; big-endian hosts are unsupported");

// DSCN-T1: line 1 is a JSON header {"dtype":"f32","shape":[...]}, followed by
// the raw little-endian f32 payload of product(shape)*4 bytes.

inline void write_dscnt(const std::string& path, const Shape& shape, const float* data) {
  nlohmann::json header;
  header["dtype"] = "f32";
  header["shape"] = shape;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << header.dump() << '\n';
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(numel(shape) * 4));
  if (!f) throw IoError("write failed: " + path);
}

template <class T>
void write_tensor(const std::string& path, const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    write_dscnt(path, t.shape(), t.data().data());
  } else {
    std::vector<float> tmp(t.data().begin(), t.data().end());
    write_dscnt(path, t.shape(), tmp.data());
  }
}

inline std::pair<Shape, std::vector<float>> read_dscnt(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(f, line)) throw IntegrityError("missing DSCN-T1 header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("bad DSCN-T1 header in " + path + ": " + e.what());
  }
  if (!header.contains("dtype") || header["dtype"] != "f32")
    throw IntegrityError("unsupported dtype in " + path);
  if (!header.contains("shape") || !header["shape"].is_array())
    throw IntegrityError("missing shape in " + path);
  Shape shape = header["shape"].get<Shape>();
  for (long d : shape)
    if (d < 0) throw IntegrityError("negative extent in " + path);
  long n = numel(shape);
  std::vector<float> data(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 4));
  if (f.gcount() != static_cast<std::streamsize>(n * 4))
    throw IntegrityError("payload shorter than header shape " + shape_str(shape) + " in " + path);
  char extra;
  if (f.read(&extra, 1), f.gcount() != 0)
    throw IntegrityError("payload longer than header shape " + shape_str(shape) + " in " + path);
  return {shape, std::move(data)};
}

template <class T>
Tensor<T> read_tensor(const std::string& path) {
  auto [shape, data] = read_dscnt(path);
  if constexpr (std::is_same_v<T, float>) {
    return Tensor<T>::from_data(shape, std::move(data));
  } else {
    std::vector<T> tmp(data.begin(), data.end());
    return Tensor<T>::from_data(shape, std::move(tmp));
  }
}

}  // namespace discn
