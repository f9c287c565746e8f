#pragma once

#include "beard/common.hpp"

#include <vector>

namespace beard {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;
};

/// Frontend parameters. Window and hop are in samples (25 ms / 10 ms at 16 kHz).
struct FeatureConfig {
  int window = 400;
  int hop = 160;
  int n_fft = 512;
  int mel_bins = 80;
  double log_eps = 1e-10;
  double f_min = 0.0;
  double f_max = 8000.0;
};

/// Time-major log-mel frames: rows are frames, columns are mel bins.
struct FeatureMatrix {
  Matrix frames;
  double frame_rate = 100.0;

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index mel_bins() const { return frames.cols(); }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// HTK-scale triangular filters, (mel_bins) x (n_fft / 2 + 1), unnormalized.
Matrix mel_filterbank(const FeatureConfig& cfg);

/// Periodic Hann window of the configured length.
std::vector<double> hann_window(int length);

/// Number of frames produced for a waveform of `num_samples`; 0 if shorter than one window.
Eigen::Index frame_count(std::size_t num_samples, const FeatureConfig& cfg);

/// log(mel energy + eps) of |FFT|^2 over Hann-windowed frames.
/// Throws std::invalid_argument on an empty waveform, a sample rate other
/// than 16 kHz, non-finite samples, or a waveform shorter than one window.
FeatureMatrix compute_logmel(const Waveform& w, const FeatureConfig& cfg = {});

/// Concatenates `factor` consecutive frames into one row; the last group is zero padded.
FeatureMatrix stack_frames(const FeatureMatrix& f, int factor);

/// Inverse of stack_frames, dropping padding beyond `num_frames`.
FeatureMatrix unstack_frames(const FeatureMatrix& f, int factor, Eigen::Index num_frames);

}  // namespace beard
