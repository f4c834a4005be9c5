// Audio ingestion and 128-bin log-mel featurization.
//
// Front end: 25 ms Hann window, 10 ms hop, 1024-point FFT power spectrum,
// 128 triangular mel filters over 125-7600 Hz, log(energy + 1e-10).

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "usm/matrix.hpp"

namespace usm {

struct AudioClip {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 16000;

  double duration() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

struct FeatureSequence {
  Matrix frames;             // T x 128
  double frame_hop = 0.010;  // seconds
  double frame_window = 0.025;

  std::size_t num_frames() const { return frames.rows; }
};

struct MelOptions {
  int sample_rate = 16000;
  std::size_t window = 400;
  std::size_t hop = 160;
  std::size_t fft_size = 1024;
  std::size_t num_bins = 128;
  double low_hz = 125.0;
  double high_hz = 7600.0;
  double energy_floor = 1e-10;
};

inline constexpr std::size_t kMelBins = 128;

// Windowed-sinc resampler. Output length is round(n * target / source).
AudioClip resample(const AudioClip& clip, int target_rate);

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular filter weights, num_bins x (fft_size/2 + 1).
Matrix mel_filterbank(const MelOptions& opts = {});

FeatureSequence log_mel(const AudioClip& clip, const MelOptions& opts = {});

// Per-utterance mean/variance normalization of each feature dimension. The
// standard deviation is floored at std_floor so constant inputs stay finite.
void normalize_utterance(Matrix& frames, double std_floor = 1e-3);

// In-place iterative radix-2 FFT. size must be a power of two.
void fft(std::vector<double>& re, std::vector<double>& im);

// RIFF/WAVE PCM-16 mono only.
AudioClip read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

// Feature dump: text header terminated by "end_header\n", then rows*cols
// little-endian float64 values in row-major order. Header lines:
//   usm-features 1
//   rows <T>
//   cols <D>
//   hop <seconds>
//   window <seconds>
void write_features(const std::filesystem::path& path, const FeatureSequence& feats);
FeatureSequence read_features(const std::filesystem::path& path);

}  // namespace usm
