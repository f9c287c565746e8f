#pragma once

#include "beard/common.hpp"
#include "beard/features.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace beard {

/// Divisor floor for normalize_vector; a constant vector maps to zeros.
inline constexpr double kNormStdFloor = 1e-5;

/// (v - mean(v)) / max(std(v), 1e-5) with the population standard deviation.
/// Throws std::invalid_argument for vectors shorter than 2.
RowVector normalize_vector(std::span<const double> v);
RowVector normalize_vector(const RowVector& v);

using LabelSequence = std::vector<int>;

/// Frozen random-projection quantizer.
///
/// Construction draws, from one Rng(seed) stream in this order: the projection
/// (d_in x d_code, row-major, N(0,1) / sqrt(d_in)), then the codebook (V x d_code,
/// row-major, N(0,1) rows scaled to unit L2 norm). Every entry is rounded to
/// float32 so the serialized form is exact.
class QuantizerState {
 public:
  QuantizerState(int d_in, int d_code, int codebook_size, std::uint64_t seed);
  /// Takes explicit matrices (used for hand-built codebooks and deserialization).
  QuantizerState(Matrix projection, Matrix codebook, std::uint64_t seed);

  int d_in() const { return static_cast<int>(projection_.rows()); }
  int d_code() const { return static_cast<int>(projection_.cols()); }
  int codebook_size() const { return static_cast<int>(codebook_.rows()); }
  std::uint64_t seed() const { return seed_; }
  const Matrix& projection() const { return projection_; }
  const Matrix& codebook() const { return codebook_; }

  std::uint64_t content_hash() const;

  std::vector<char> serialize() const;
  static QuantizerState deserialize(const std::vector<char>& bytes);
  void save(const std::filesystem::path& path) const;
  static QuantizerState load(const std::filesystem::path& path);

 private:
  void validate() const;

  Matrix projection_;
  Matrix codebook_;
  std::uint64_t seed_ = 0;
};

QuantizerState build_quantizer(int d_in, int d_code, int codebook_size, std::uint64_t seed);

/// Nearest codebook row (squared Euclidean, lowest index on ties) of each
/// normalized, projected frame. `normalize = false` skips the input
/// normalization and exists for diagnostics only.
LabelSequence quantize(const QuantizerState& q, const FeatureMatrix& f, bool normalize = true);

struct UtilizationStats {
  double entropy_bits = 0.0;
  double fraction_used = 0.0;
};

UtilizationStats codebook_utilization(const LabelSequence& labels, int codebook_size);

}  // namespace beard
