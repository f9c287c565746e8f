#pragma once

#include "beard/features.hpp"

#include <cstdint>
#include <vector>

namespace beard {

using FrameMask = std::vector<bool>;

inline constexpr int kMaskRetries = 100;
inline constexpr double kMaskNoiseStd = 0.1;

struct MaskPlan {
  FrameMask input_mask;   // true = masked, one entry per input feature frame
  FrameMask output_mask;  // one entry per encoder output frame
  int span = 4;
  double prob = 0.10;
  std::uint64_t seed = 0;  // seed of the accepted draw (requested seed + retries)
  int downsample_factor = 1;

  std::size_t masked_outputs() const;
  std::size_t unmasked_outputs() const;
};

/// Each frame starts a span [t, t + span) with probability `prob`; spans are
/// clipped at the end and merge on overlap. A draw that leaves no unmasked
/// output frame is redrawn with seed + 1, up to 100 retries, then throws
/// std::runtime_error.
MaskPlan sample_mask(std::size_t num_frames, int span, double prob, std::uint64_t seed, int downsample_factor = 1);

/// Output frame t is masked iff any input frame in [t * factor, (t + 1) * factor) is masked.
FrameMask project_mask(const FrameMask& input_mask, int factor);

/// Replaces masked rows with i.i.d. N(0, 0.1^2) noise drawn row by row from Rng(noise_seed).
FeatureMatrix apply_mask(const FeatureMatrix& f, const MaskPlan& m, std::uint64_t noise_seed);

}  // namespace beard
