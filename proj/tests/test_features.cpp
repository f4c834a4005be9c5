#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "usm/data.hpp"
#include "usm/features.hpp"
#include "usm/random.hpp"

using namespace usm;

namespace {

constexpr double kPi = std::numbers::pi;

AudioClip sine(double hz, int rate, double seconds, double amplitude = 0.5) {
  AudioClip c;
  c.sample_rate = rate;
  c.samples.resize(static_cast<std::size_t>(seconds * rate));
  for (std::size_t i = 0; i < c.samples.size(); ++i) c.samples[i] = amplitude * std::sin(2 * kPi * hz * i / rate);
  return c;
}

AudioClip noise(std::size_t n, std::uint64_t seed, double stddev = 0.1) {
  Rng rng(seed);
  AudioClip c;
  c.samples.resize(n);
  for (auto& s : c.samples) s = rng.normal(0.0, stddev);
  return c;
}

// Independent log-mel: direct DFT, filters built in Hz from the mel
// formula, no shared code with the library.
Matrix reference_log_mel(const AudioClip& clip) {
  const std::size_t win = 400, hop = 160, nfft = 1024, bins = 128, nk = nfft / 2 + 1;
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  const double lo = mel(125.0), hi = mel(7600.0), step = (hi - lo) / (bins + 1);
  const std::size_t frames = clip.samples.size() < win ? 0 : 1 + (clip.samples.size() - win) / hop;
  Matrix out(frames, bins);
  for (std::size_t f = 0; f < frames; ++f) {
    std::vector<double> power(nk);
    for (std::size_t k = 0; k < nk; ++k) {
      double re = 0, im = 0;
      for (std::size_t n = 0; n < win; ++n) {
        const double w = 0.5 * (1 - std::cos(2 * kPi * n / (win - 1)));
        const double x = clip.samples[f * hop + n] * w;
        re += x * std::cos(2 * kPi * k * n / nfft);
        im -= x * std::sin(2 * kPi * k * n / nfft);
      }
      power[k] = re * re + im * im;
    }
    for (std::size_t b = 0; b < bins; ++b) {
      const double l = lo + b * step, c = l + step, r = c + step;
      double e = 0;
      for (std::size_t k = 0; k < nk; ++k) {
        const double m = mel(k * 16000.0 / nfft);
        double w = 0;
        if (m > l && m <= c) w = (m - l) / (c - l);
        else if (m > c && m < r) w = (r - m) / (r - c);
        e += w * power[k];
      }
      out(f, b) = std::log(e + 1e-10);
    }
  }
  return out;
}

std::size_t dominant_bin(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::size_t best = 0;
  double best_mag = -1;
  for (std::size_t k = 1; k < n / 2; ++k) {
    double re = 0, im = 0;
    for (std::size_t i = 0; i < n; ++i) {
      re += x[i] * std::cos(2 * kPi * k * i / n);
      im -= x[i] * std::sin(2 * kPi * k * i / n);
    }
    const double mag = re * re + im * im;
    if (mag > best_mag) best_mag = mag, best = k;
  }
  return best;
}

}  // namespace

TEST(Resample, SameRateIsIdentity) {
  AudioClip c = noise(1234, 1);
  EXPECT_EQ(resample(c, 16000).samples, c.samples);
}

TEST(Resample, EmptyInputGivesEmptyOutput) {
  AudioClip c;
  c.sample_rate = 8000;
  EXPECT_TRUE(resample(c, 16000).samples.empty());
}

TEST(Resample, UpsampledSineKeepsItsFrequency) {
  AudioClip c = sine(100.0, 8000, 1.0);
  AudioClip up = resample(c, 16000);
  ASSERT_EQ(up.sample_rate, 16000);
  ASSERT_EQ(up.samples.size(), 16000u);
  // A 1 s window: bin k is k Hz.
  EXPECT_EQ(dominant_bin(up.samples), 100u);
}

TEST(Resample, LengthArithmetic) {
  AudioClip c = noise(48000, 2);
  c.sample_rate = 48000;
  const auto n = resample(c, 16000).samples.size();
  EXPECT_GE(n, 15999u);
  EXPECT_LE(n, 16001u);
}

TEST(LogMel, FrameCount) {
  EXPECT_EQ(log_mel(noise(16000, 3)).num_frames(), 98u);
  EXPECT_EQ(log_mel(noise(399, 3)).num_frames(), 0u);
  EXPECT_EQ(log_mel(noise(400, 3)).num_frames(), 1u);
}

TEST(LogMel, SilenceSitsAtTheFloor) {
  AudioClip c;
  c.samples.assign(4000, 0.0);
  const auto f = log_mel(c);
  for (double v : f.frames.data) EXPECT_EQ(v, std::log(1e-10));
}

TEST(LogMel, MatchesIndependentReference) {
  AudioClip c = noise(400 + 160 * 5, 4);
  Matrix expected = reference_log_mel(c);
  Matrix got = log_mel(c).frames;
  ASSERT_EQ(got.rows, expected.rows);
  for (std::size_t i = 0; i < got.data.size(); ++i) EXPECT_NEAR(got.data[i], expected.data[i], 1e-6);
}

TEST(LogMel, ShiftByWholeHopsShiftsFrames) {
  AudioClip c = noise(8000, 5);
  AudioClip delayed = c;
  const std::size_t k = 3;
  delayed.samples.insert(delayed.samples.begin(), k * 160, 0.0);
  const Matrix a = log_mel(c).frames, b = log_mel(delayed).frames;
  for (std::size_t t = 0; t < a.rows; ++t)
    for (std::size_t j = 0; j < a.cols; ++j) EXPECT_NEAR(b(t + k, j), a(t, j), 1e-9);
}

TEST(LogMel, GainAddsTwiceLogAlpha) {
  AudioClip c = noise(4000, 6, 0.3);
  AudioClip louder = c;
  const double alpha = 2.5;
  for (auto& s : louder.samples) s *= alpha;
  const Matrix a = log_mel(c).frames, b = log_mel(louder).frames;
  // Relative error introduced by the additive floor is ~1e-10 / energy.
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] > std::log(1e-10) + 20) EXPECT_NEAR(b.data[i] - a.data[i], 2 * std::log(alpha), 1e-9);
}

TEST(Features, NormalizeGivesZeroMeanUnitVariance) {
  Matrix m = log_mel(noise(8000, 7)).frames;
  normalize_utterance(m);
  for (std::size_t j = 0; j < m.cols; ++j) {
    double mean = 0, var = 0;
    for (std::size_t t = 0; t < m.rows; ++t) mean += m(t, j);
    mean /= m.rows;
    for (std::size_t t = 0; t < m.rows; ++t) var += (m(t, j) - mean) * (m(t, j) - mean);
    var /= m.rows;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-9);
  }
}

TEST(Features, NormalizeConstantInputStaysFinite) {
  Matrix m(10, 4, 3.0);
  normalize_utterance(m);
  for (double v : m.data) EXPECT_EQ(v, 0.0);
}

TEST(Wav, RoundTripOnThePcmGrid) {
  AudioClip c = sine(440.0, 16000, 0.1);
  for (auto& s : c.samples) s = std::round(s * 32768.0) / 32768.0;
  const auto path = std::filesystem::temp_directory_path() / "usm_test_roundtrip.wav";
  write_wav(path, c);
  AudioClip back = read_wav(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.samples.size(), c.samples.size());
  EXPECT_EQ(back.sample_rate, 16000);
  for (std::size_t i = 0; i < c.samples.size(); ++i) EXPECT_NEAR(back.samples[i], c.samples[i], 1e-12);
}

TEST(Wav, RejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "usm_test_garbage.wav";
  { std::ofstream(path) << "not a wav file at all"; }
  EXPECT_THROW(read_wav(path), std::runtime_error);
  std::filesystem::remove(path);
}
