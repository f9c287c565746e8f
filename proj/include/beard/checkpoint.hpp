#pragma once

#include "beard/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace beard {

enum class TensorDType : std::uint32_t { kFloat32 = 1, kFloat64 = 2 };

struct NamedTensor {
  std::string name;
  Matrix value;
  TensorDType dtype = TensorDType::kFloat64;
};

/// Binary layout (all integers little-endian):
///   "BRDCKPT1"
///   u32 config_len, config_len bytes of UTF-8 JSON
///   u64 rng_seed, u64 rng_counter, u64 step
///   u32 tensor_count, then per tensor:
///     u32 name_len, name bytes, u32 dtype (1 = f32, 2 = f64), u32 rows, u32 cols,
///     rows * cols row-major values
/// Training state is written as f64 so a resumed run continues bit-exactly.
struct CheckpointData {
  std::string config_json;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::uint64_t step = 0;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

std::vector<char> encode_checkpoint(const CheckpointData& c);
CheckpointData decode_checkpoint(const std::vector<char>& bytes);
void save_checkpoint(const std::filesystem::path& path, const CheckpointData& c);
CheckpointData load_checkpoint(const std::filesystem::path& path);

}  // namespace beard
