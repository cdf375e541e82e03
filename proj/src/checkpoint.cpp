#include "wrim/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace wrim {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

const NamedArray* Archive::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

namespace {

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw std::runtime_error(path + ": truncated archive");
  return value;
}

std::string get_string(std::ifstream& in, std::size_t n, const std::string& path) {
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw std::runtime_error(path + ": truncated archive");
  }
  return s;
}

}  // namespace

void write_archive(const std::string& path, const Archive& archive) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  put<std::uint64_t>(out, archive.config_json.size());
  out.write(archive.config_json.data(), static_cast<std::streamsize>(archive.config_json.size()));
  put<std::uint64_t>(out, archive.arrays.size());
  for (const auto& a : archive.arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(a.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (Index d : a.shape) put<std::int64_t>(out, d);
    if (a.dtype == DType::kFloat32) {
      for (double v : a.values) put<float>(out, static_cast<float>(v));
    } else {
      for (double v : a.values) put<double>(out, v);
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

Archive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
  if (get_string(in, magic_len, path) != std::string(kCheckpointMagic, magic_len)) {
    throw std::runtime_error(path + ": not a " + std::string(kCheckpointMagic) + " archive");
  }
  Archive archive;
  archive.config_json = get_string(in, get<std::uint64_t>(in, path), path);
  const auto count = get<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = get_string(in, get<std::uint32_t>(in, path), path);
    const auto dtype = get<std::uint8_t>(in, path);
    if (dtype > 1) throw std::runtime_error(path + ": unknown dtype for " + a.name);
    a.dtype = static_cast<DType>(dtype);
    const auto rank = get<std::uint32_t>(in, path);
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(get<std::int64_t>(in, path));
    const auto n = static_cast<std::size_t>(shape_size(a.shape));
    a.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      a.values[k] = a.dtype == DType::kFloat32 ? static_cast<double>(get<float>(in, path)) : get<double>(in, path);
    }
    archive.arrays.push_back(std::move(a));
  }
  return archive;
}

}  // namespace wrim
