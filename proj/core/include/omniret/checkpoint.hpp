#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "omniret/tensor.hpp"

namespace omniret {

/// Named tensor map + config JSON + step counter, stored in a little-endian
/// binary layout: magic "ORET", format version u32, tensor count u32; per
/// tensor: name length u16 + UTF-8 name, rank u8, dims as u64 each, dtype
/// tag u8 (0 = f32, 1 = f64), raw row-major payload; then config length u64
/// + JSON bytes; step u64.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::string config_json;
  std::uint64_t step = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace omniret
