#include "beard/features.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace beard {

namespace {

// The FFTW planner is not thread-safe; execution on an existing plan is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(n));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
    std::lock_guard lock(planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard lock(planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  void execute() { fftw_execute(plan_); }
  double power(int k) const { return out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]; }

 private:
  int n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hann_window(int length) {
  std::vector<double> w(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i)
    w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / length);
  return w;
}

Matrix mel_filterbank(const FeatureConfig& cfg) {
  const int bins = cfg.n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.f_min);
  const double mel_hi = hz_to_mel(cfg.f_max);
  std::vector<double> edges(static_cast<std::size_t>(cfg.mel_bins + 2));
  for (int i = 0; i < cfg.mel_bins + 2; ++i)
    edges[static_cast<std::size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.mel_bins + 1));

  Matrix fb = Matrix::Zero(cfg.mel_bins, bins);
  for (int m = 0; m < cfg.mel_bins; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * kSampleRate / cfg.n_fft;
      if (f > left && f < right)
        fb(m, k) = f <= center ? (f - left) / (center - left) : (right - f) / (right - center);
    }
  }
  return fb;
}

Eigen::Index frame_count(std::size_t num_samples, const FeatureConfig& cfg) {
  if (num_samples < static_cast<std::size_t>(cfg.window)) return 0;
  return static_cast<Eigen::Index>((num_samples - static_cast<std::size_t>(cfg.window)) /
                                   static_cast<std::size_t>(cfg.hop)) + 1;
}

FeatureMatrix compute_logmel(const Waveform& w, const FeatureConfig& cfg) {
  if (w.samples.empty()) throw std::invalid_argument("compute_logmel: empty waveform");
  if (w.sample_rate != kSampleRate)
    throw std::invalid_argument("compute_logmel: sample rate must be 16000 Hz, got " +
                                std::to_string(w.sample_rate));
  if (cfg.window < 1 || cfg.hop < 1 || cfg.n_fft < cfg.window || cfg.mel_bins < 1)
    throw std::invalid_argument("compute_logmel: invalid feature configuration");
  for (double s : w.samples)
    if (!std::isfinite(s)) throw std::invalid_argument("compute_logmel: non-finite sample");
  const Eigen::Index frames = frame_count(w.samples.size(), cfg);
  if (frames < 1) throw std::invalid_argument("compute_logmel: waveform shorter than one window");

  const Matrix fb = mel_filterbank(cfg);
  const auto window = hann_window(cfg.window);
  const int bins = cfg.n_fft / 2 + 1;
  RealFft fft(cfg.n_fft);
  RowVector power(bins);

  FeatureMatrix out;
  out.frame_rate = static_cast<double>(kSampleRate) / cfg.hop;
  out.frames.resize(frames, cfg.mel_bins);
  for (Eigen::Index t = 0; t < frames; ++t) {
    double* in = fft.input();
    const std::size_t start = static_cast<std::size_t>(t) * static_cast<std::size_t>(cfg.hop);
    for (int i = 0; i < cfg.n_fft; ++i)
      in[i] = i < cfg.window ? w.samples[start + static_cast<std::size_t>(i)] * window[static_cast<std::size_t>(i)] : 0.0;
    fft.execute();
    for (int k = 0; k < bins; ++k) power(k) = fft.power(k);
    const RowVector energy = power * fb.transpose();
    for (int m = 0; m < cfg.mel_bins; ++m) out.frames(t, m) = std::log(energy(m) + cfg.log_eps);
  }
  return out;
}

FeatureMatrix stack_frames(const FeatureMatrix& f, int factor) {
  if (factor < 1) throw std::invalid_argument("stack_frames: factor must be >= 1");
  const Eigen::Index T = f.num_frames(), F = f.mel_bins();
  const Eigen::Index groups = (T + factor - 1) / factor;
  FeatureMatrix out;
  out.frame_rate = f.frame_rate / factor;
  out.frames = Matrix::Zero(groups, F * factor);
  for (Eigen::Index t = 0; t < T; ++t)
    out.frames.block(t / factor, (t % factor) * F, 1, F) = f.frames.row(t);
  return out;
}

FeatureMatrix unstack_frames(const FeatureMatrix& f, int factor, Eigen::Index num_frames) {
  if (factor < 1) throw std::invalid_argument("unstack_frames: factor must be >= 1");
  if (f.mel_bins() % factor != 0) throw std::invalid_argument("unstack_frames: width not divisible by factor");
  const Eigen::Index F = f.mel_bins() / factor;
  if (num_frames > f.num_frames() * factor) throw std::invalid_argument("unstack_frames: too many frames requested");
  FeatureMatrix out;
  out.frame_rate = f.frame_rate * factor;
  out.frames.resize(num_frames, F);
  for (Eigen::Index t = 0; t < num_frames; ++t)
    out.frames.row(t) = f.frames.block(t / factor, (t % factor) * F, 1, F);
  return out;
}

}  // namespace beard
