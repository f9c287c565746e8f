#include "beard/checkpoint.hpp"

#include "beard/binio.hpp"

namespace beard {

const NamedTensor* CheckpointData::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<char> encode_checkpoint(const CheckpointData& c) {
  std::vector<char> out;
  binio::put_bytes(out, "BRDCKPT1");
  binio::put_u32(out, static_cast<std::uint32_t>(c.config_json.size()));
  binio::put_bytes(out, c.config_json);
  binio::put_u64(out, c.rng_seed);
  binio::put_u64(out, c.rng_counter);
  binio::put_u64(out, c.step);
  binio::put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    binio::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    binio::put_bytes(out, t.name);
    binio::put_u32(out, static_cast<std::uint32_t>(t.dtype));
    binio::put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    binio::put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      if (t.dtype == TensorDType::kFloat32)
        binio::put_f32(out, static_cast<float>(t.value.data()[i]));
      else
        binio::put_f64(out, t.value.data()[i]);
    }
  }
  return out;
}

CheckpointData decode_checkpoint(const std::vector<char>& bytes) {
  binio::Reader r(bytes);
  if (r.bytes(8) != "BRDCKPT1") throw DataError("checkpoint: bad magic");
  CheckpointData c;
  c.config_json = r.bytes(r.u32());
  c.rng_seed = r.u64();
  c.rng_counter = r.u64();
  c.step = r.u64();
  const auto n = r.u32();
  for (std::uint32_t k = 0; k < n; ++k) {
    NamedTensor t;
    t.name = r.bytes(r.u32());
    const auto dtype = r.u32();
    if (dtype != 1 && dtype != 2) throw DataError("checkpoint: unknown dtype for tensor '" + t.name + "'");
    t.dtype = static_cast<TensorDType>(dtype);
    const auto rows = r.u32(), cols = r.u32();
    t.value.resize(rows, cols);
    for (Eigen::Index i = 0; i < t.value.size(); ++i)
      t.value.data()[i] = t.dtype == TensorDType::kFloat32 ? static_cast<double>(r.f32()) : r.f64();
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& c) {
  binio::write_file(path.string(), encode_checkpoint(c));
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(binio::read_file(path.string()));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace beard
