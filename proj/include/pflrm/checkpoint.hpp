#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pflrm/tensor.hpp"

namespace pflrm::ad {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  Dtype dtype = Dtype::F64;
};

/// Little-endian container: magic "PFTN", u32 version, u32 tensor count, then
/// per tensor: u16 name length, name bytes, u8 rank, u32 extents, u8 dtype
/// (0=f32, 1=f64), raw data. Entry order is preserved.
void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

/// Lookup helper; throws when the name is missing.
const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace pflrm::ad
