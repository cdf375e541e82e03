#pragma once

#include "wrim/layers.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wrim {

/// Named-tensor archive. Binary layout, all integers little-endian:
///
///   "WRIMNET-CKPT-1"                     14-byte magic
///   u64 n, n bytes                       serialized network config (JSON, may be empty)
///   u64 count                            number of tensors
///   per tensor:
///     u32 n, n bytes                     name
///     u8                                 dtype (0 = float32, 1 = float64)
///     u32 rank, rank x i64               shape
///     raw element data, row-major
///
/// Writing the same archive twice yields identical bytes.
inline constexpr char kCheckpointMagic[] = "WRIMNET-CKPT-1";

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

struct NamedArray {
  std::string name;
  Shape shape;
  DType dtype = DType::kFloat32;
  std::vector<double> values;  // widened copy; narrowed again on write for float32

  template <typename Scalar>
  static NamedArray from_tensor(std::string name, const Tensor<Scalar>& t) {
    NamedArray a{std::move(name), t.shape(), sizeof(Scalar) == 4 ? DType::kFloat32 : DType::kFloat64, {}};
    a.values.assign(t.data(), t.data() + t.size());
    return a;
  }

  template <typename Scalar>
  Tensor<Scalar> to_tensor() const {
    Tensor<Scalar> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(values[static_cast<size_t>(i)]);
    return t;
  }
};

struct Archive {
  std::string config_json;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

void write_archive(const std::string& path, const Archive& archive);
/// Throws std::runtime_error on a bad magic, truncation or unknown dtype.
Archive read_archive(const std::string& path);

/// Snapshot of every named tensor in `params`.
template <typename Scalar>
Archive archive_parameters(const ParameterList<Scalar>& params, std::string config_json) {
  Archive a{std::move(config_json), {}};
  for (const auto& p : params) a.arrays.push_back(NamedArray::from_tensor(p.name, p.param->value));
  return a;
}

/// Copies archive tensors into `params`. Every parameter must be present with
/// a matching shape; throws std::runtime_error otherwise.
template <typename Scalar>
void restore_parameters(ParameterList<Scalar>& params, const Archive& archive) {
  for (auto& p : params) {
    const NamedArray* a = archive.find(p.name);
    if (a == nullptr) throw std::runtime_error("checkpoint is missing tensor " + p.name);
    if (a->shape != p.param->value.shape()) {
      throw std::runtime_error("checkpoint tensor " + p.name + " has shape " + shape_string(a->shape) +
                               ", model expects " + shape_string(p.param->value.shape()));
    }
    p.param->value = a->to_tensor<Scalar>();
  }
}

}  // namespace wrim
