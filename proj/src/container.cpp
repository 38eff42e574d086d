// SPDX-License-Identifier: Apache-2.0
#include "kmae/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "container writer assumes a little-endian host");

namespace kmae {

size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  if (dtype == "c64") return 8;
  if (dtype == "u8") return 1;
  throw DataError("container: unknown dtype '" + dtype + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return true;
  return false;
}

const ContainerArray& Container::get(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return a;
  throw DataError("container: missing array '" + name + "'");
}

void Container::add_array(ContainerArray arr) {
  if (has(arr.name))
    throw DataError("container: duplicate array '" + arr.name + "'");
  const size_t expected = static_cast<size_t>(arr.element_count()) *
                          dtype_size(arr.dtype);
  if (arr.bytes.size() != expected)
    throw DataError("container: array '" + arr.name + "' payload is " +
                    std::to_string(arr.bytes.size()) + " bytes, expected " +
                    std::to_string(expected));
  arrays_.push_back(std::move(arr));
}

namespace {

template <class T>
std::vector<uint8_t> to_bytes(std::span<const T> data) {
  std::vector<uint8_t> out(data.size() * sizeof(T));
  std::memcpy(out.data(), data.data(), out.size());
  return out;
}

template <class T>
std::vector<T> from_bytes(const ContainerArray& a) {
  std::vector<T> out(a.bytes.size() / sizeof(T));
  std::memcpy(out.data(), a.bytes.data(), a.bytes.size());
  return out;
}

}  // namespace

void Container::add_f32(const std::string& name, std::vector<long long> shape,
                        std::span<const float> data) {
  add_array({name, "f32", std::move(shape), to_bytes(data)});
}
void Container::add_f64(const std::string& name, std::vector<long long> shape,
                        std::span<const double> data) {
  add_array({name, "f64", std::move(shape), to_bytes(data)});
}
void Container::add_u8(const std::string& name, std::vector<long long> shape,
                       std::span<const uint8_t> data) {
  add_array({name, "u8", std::move(shape), to_bytes(data)});
}
void Container::add_c64(const std::string& name, std::vector<long long> shape,
                        std::span<const std::complex<float>> data) {
  add_array({name, "c64", std::move(shape), to_bytes(data)});
}

std::vector<float> Container::f32(const std::string& name) const {
  const auto& a = get(name);
  if (a.dtype != "f32") throw DataError("container: '" + name + "' is not f32");
  return from_bytes<float>(a);
}
std::vector<double> Container::f64(const std::string& name) const {
  const auto& a = get(name);
  if (a.dtype != "f64") throw DataError("container: '" + name + "' is not f64");
  return from_bytes<double>(a);
}
std::vector<uint8_t> Container::u8(const std::string& name) const {
  const auto& a = get(name);
  if (a.dtype != "u8") throw DataError("container: '" + name + "' is not u8");
  return a.bytes;
}
std::vector<std::complex<float>> Container::c64(const std::string& name) const {
  const auto& a = get(name);
  if (a.dtype != "c64") throw DataError("container: '" + name + "' is not c64");
  return from_bytes<std::complex<float>>(a);
}

void write_container(const std::string& path, const Container& c) {
  nlohmann::json manifest;
  manifest["arrays"] = nlohmann::json::array();
  for (const auto& a : c.arrays()) {
    nlohmann::json ja;
    ja["name"] = a.name;
    ja["dtype"] = a.dtype;
    ja["shape"] = a.shape;
    manifest["arrays"].push_back(ja);
  }
  manifest["meta"] = c.meta;
  const std::string mstr = manifest.dump();

  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + tmp.string());
    f.write("KMAE", 4);
    const uint32_t version = kContainerVersion;
    f.write(reinterpret_cast<const char*>(&version), 4);
    const uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& a : c.arrays())
      f.write(reinterpret_cast<const char*>(a.bytes.data()),
              static_cast<std::streamsize>(a.bytes.size()));
    if (!f) {
      f.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("rename failed for " + target.string() + ": " + ec.message());
  }
}

Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "KMAE", 4) != 0)
    throw DataError("not a KMAE container: " + path);
  uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (version != kContainerVersion)
    throw DataError("unsupported container version " + std::to_string(version));
  uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), 8);
  std::string mstr(mlen, '\0');
  f.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw DataError("truncated container manifest: " + path);

  nlohmann::json manifest = nlohmann::json::parse(mstr, nullptr, false);
  if (manifest.is_discarded())
    throw DataError("invalid container manifest JSON: " + path);

  Container c;
  c.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& ja : manifest.at("arrays")) {
    ContainerArray a;
    a.name = ja.at("name").get<std::string>();
    a.dtype = ja.at("dtype").get<std::string>();
    a.shape = ja.at("shape").get<std::vector<long long>>();
    const size_t nbytes = static_cast<size_t>(a.element_count()) *
                          dtype_size(a.dtype);
    a.bytes.resize(nbytes);
    f.read(reinterpret_cast<char*>(a.bytes.data()),
           static_cast<std::streamsize>(nbytes));
    if (!f) throw DataError("truncated container payload: " + path);
    c.add_array(std::move(a));
  }
  return c;
}

uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string json_digest(const nlohmann::json& j) {
  const std::string s = j.dump();
  const uint64_t h = fnv1a64(
      std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace kmae
