#include "beard/masking.hpp"

#include "beard/rng.hpp"

#include <algorithm>
#include <stdexcept>

namespace beard {

std::size_t MaskPlan::masked_outputs() const {
  return static_cast<std::size_t>(std::count(output_mask.begin(), output_mask.end(), true));
}

std::size_t MaskPlan::unmasked_outputs() const { return output_mask.size() - masked_outputs(); }

FrameMask project_mask(const FrameMask& input_mask, int factor) {
  if (factor < 1) throw std::invalid_argument("project_mask: factor must be >= 1");
  const auto f = static_cast<std::size_t>(factor);
  FrameMask out((input_mask.size() + f - 1) / f, false);
  for (std::size_t t = 0; t < input_mask.size(); ++t)
    if (input_mask[t]) out[t / f] = true;
  return out;
}

MaskPlan sample_mask(std::size_t num_frames, int span, double prob, std::uint64_t seed, int downsample_factor) {
  if (num_frames < 1) throw std::invalid_argument("sample_mask: need at least one frame");
  if (span < 1) throw std::invalid_argument("sample_mask: span must be >= 1");
  if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("sample_mask: prob must lie in [0, 1]");
  MaskPlan plan;
  plan.span = span;
  plan.prob = prob;
  plan.downsample_factor = downsample_factor;
  for (int attempt = 0; attempt <= kMaskRetries; ++attempt) {
    Rng rng(seed + static_cast<std::uint64_t>(attempt));
    FrameMask mask(num_frames, false);
    for (std::size_t t = 0; t < num_frames; ++t) {
      if (!rng.bernoulli(prob)) continue;
      const std::size_t end = std::min(num_frames, t + static_cast<std::size_t>(span));
      std::fill(mask.begin() + static_cast<std::ptrdiff_t>(t), mask.begin() + static_cast<std::ptrdiff_t>(end), true);
    }
    FrameMask out = project_mask(mask, downsample_factor);
    if (std::find(out.begin(), out.end(), false) != out.end()) {
      plan.input_mask = std::move(mask);
      plan.output_mask = std::move(out);
      plan.seed = seed + static_cast<std::uint64_t>(attempt);
      return plan;
    }
  }
  throw std::runtime_error("sample_mask: no unmasked output frame after " + std::to_string(kMaskRetries) +
                           " retries");
}

FeatureMatrix apply_mask(const FeatureMatrix& f, const MaskPlan& m, std::uint64_t noise_seed) {
  if (m.input_mask.size() != static_cast<std::size_t>(f.num_frames()))
    throw std::invalid_argument("apply_mask: mask length " + std::to_string(m.input_mask.size()) +
                                " does not match frame count " + std::to_string(f.num_frames()));
  FeatureMatrix out = f;
  Rng rng(noise_seed);
  for (Eigen::Index t = 0; t < f.num_frames(); ++t) {
    if (!m.input_mask[static_cast<std::size_t>(t)]) continue;
    for (Eigen::Index c = 0; c < f.mel_bins(); ++c) out.frames(t, c) = kMaskNoiseStd * rng.normal();
  }
  return out;
}

}  // namespace beard
