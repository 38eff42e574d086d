// SPDX-License-Identifier: Apache-2.0
//
// Binary container for datasets, masks, checkpoints and predictions.
// Layout: magic "KMAE" | u32 version (LE) | u64 manifest length (LE) |
// manifest JSON (UTF-8) | payload. The manifest lists arrays as
// {"arrays": [{"name", "dtype", "shape"}], "meta": {...}}; payload is the
// arrays concatenated in manifest order, row-major, little-endian. dtype
// "c64" is interleaved (real, imaginary) f32 pairs.
#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kmae/common.hpp"

namespace kmae {

inline constexpr uint32_t kContainerVersion = 1;

struct ContainerArray {
  std::string name;
  std::string dtype;  // f32 | f64 | c64 | u8
  std::vector<long long> shape;
  std::vector<uint8_t> bytes;

  long long element_count() const {
    long long n = 1;
    for (long long d : shape) n *= d;
    return n;
  }
};

size_t dtype_size(const std::string& dtype);

class Container {
 public:
  nlohmann::json meta = nlohmann::json::object();

  const std::vector<ContainerArray>& arrays() const { return arrays_; }
  bool has(const std::string& name) const;
  const ContainerArray& get(const std::string& name) const;

  void add_f32(const std::string& name, std::vector<long long> shape,
               std::span<const float> data);
  void add_f64(const std::string& name, std::vector<long long> shape,
               std::span<const double> data);
  void add_u8(const std::string& name, std::vector<long long> shape,
              std::span<const uint8_t> data);
  void add_c64(const std::string& name, std::vector<long long> shape,
               std::span<const std::complex<float>> data);

  std::vector<float> f32(const std::string& name) const;
  std::vector<double> f64(const std::string& name) const;
  std::vector<uint8_t> u8(const std::string& name) const;
  std::vector<std::complex<float>> c64(const std::string& name) const;

  void add_array(ContainerArray arr);

 private:
  std::vector<ContainerArray> arrays_;
};

// Atomic write: temp file in the target directory, then rename.
void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

// FNV-1a over a canonical JSON dump; recorded in outputs as the config hash.
uint64_t fnv1a64(std::span<const uint8_t> bytes);
std::string json_digest(const nlohmann::json& j);

}  // namespace kmae
