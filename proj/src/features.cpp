#include "usm/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace usm {

namespace {

constexpr double kPi = std::numbers::pi;

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  return std::sin(kPi * x) / (kPi * x);
}

template <typename T>
void put_le(std::ostream& os, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const unsigned char* p) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) throw std::invalid_argument("resample: target rate must be positive");
  if (clip.sample_rate <= 0) throw std::invalid_argument("resample: source rate must be positive");
  AudioClip out;
  out.sample_rate = target_rate;
  if (clip.samples.empty()) return out;
  if (target_rate == clip.sample_rate) {
    out.samples = clip.samples;
    return out;
  }
  const double ratio = static_cast<double>(target_rate) / clip.sample_rate;
  const std::size_t n_out = static_cast<std::size_t>(
      std::llround(static_cast<double>(clip.samples.size()) * ratio));
  // Low-pass at the lower of the two Nyquist rates.
  const double cutoff = std::min(1.0, ratio);
  const double half_width = 16.0 / cutoff;  // in source samples
  const long n_in = static_cast<long>(clip.samples.size());
  out.samples.resize(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) / ratio;
    const long first = static_cast<long>(std::ceil(pos - half_width));
    const long last = static_cast<long>(std::floor(pos + half_width));
    double acc = 0.0;
    for (long n = std::max(0L, first); n <= std::min(n_in - 1, last); ++n) {
      const double dx = pos - static_cast<double>(n);
      const double window = 0.5 + 0.5 * std::cos(kPi * dx / half_width);
      acc += clip.samples[static_cast<std::size_t>(n)] * cutoff * sinc(cutoff * dx) * window;
    }
    out.samples[i] = acc;
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Matrix mel_filterbank(const MelOptions& opts) {
  const std::size_t n_fft_bins = opts.fft_size / 2 + 1;
  Matrix w(opts.num_bins, n_fft_bins);
  const double mel_lo = hz_to_mel(opts.low_hz);
  const double mel_hi = hz_to_mel(opts.high_hz);
  const double delta = (mel_hi - mel_lo) / static_cast<double>(opts.num_bins + 1);
  for (std::size_t b = 0; b < opts.num_bins; ++b) {
    const double left = mel_lo + delta * static_cast<double>(b);
    const double center = left + delta;
    const double right = center + delta;
    for (std::size_t k = 0; k < n_fft_bins; ++k) {
      const double hz = static_cast<double>(k) * opts.sample_rate / static_cast<double>(opts.fft_size);
      const double mel = hz_to_mel(hz);
      if (mel > left && mel < right)
        w(b, k) = mel <= center ? (mel - left) / (center - left) : (right - mel) / (right - center);
    }
  }
  return w;
}

void fft(std::vector<double>& re, std::vector<double>& im) {
  const std::size_t n = re.size();
  if (n == 0 || (n & (n - 1)) != 0 || im.size() != n)
    throw std::invalid_argument("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const double wr = std::cos(ang * static_cast<double>(k));
        const double wi = std::sin(ang * static_cast<double>(k));
        const std::size_t a = i + k, b = i + k + len / 2;
        const double xr = re[b] * wr - im[b] * wi;
        const double xi = re[b] * wi + im[b] * wr;
        re[b] = re[a] - xr;
        im[b] = im[a] - xi;
        re[a] += xr;
        im[a] += xi;
      }
    }
  }
}

FeatureSequence log_mel(const AudioClip& clip, const MelOptions& opts) {
  if (clip.sample_rate != opts.sample_rate)
    throw std::invalid_argument("log_mel: expected " + std::to_string(opts.sample_rate) +
                                " Hz audio, got " + std::to_string(clip.sample_rate));
  FeatureSequence feats;
  feats.frame_hop = static_cast<double>(opts.hop) / opts.sample_rate;
  feats.frame_window = static_cast<double>(opts.window) / opts.sample_rate;
  const std::size_t n = clip.samples.size();
  const std::size_t num_frames = n < opts.window ? 0 : 1 + (n - opts.window) / opts.hop;
  feats.frames = Matrix(num_frames, opts.num_bins);
  if (num_frames == 0) return feats;

  static thread_local MelOptions cached_opts{};
  static thread_local Matrix cached_bank;
  if (cached_bank.empty() || cached_opts.num_bins != opts.num_bins ||
      cached_opts.fft_size != opts.fft_size || cached_opts.low_hz != opts.low_hz ||
      cached_opts.high_hz != opts.high_hz || cached_opts.sample_rate != opts.sample_rate) {
    cached_bank = mel_filterbank(opts);
    cached_opts = opts;
  }
  const Matrix& bank = cached_bank;

  std::vector<double> window(opts.window);
  for (std::size_t i = 0; i < opts.window; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) /
                                     static_cast<double>(opts.window - 1));
  const std::size_t n_fft_bins = opts.fft_size / 2 + 1;
  std::vector<double> re(opts.fft_size), im(opts.fft_size), power(n_fft_bins);
  for (std::size_t f = 0; f < num_frames; ++f) {
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    const double* src = clip.samples.data() + f * opts.hop;
    for (std::size_t i = 0; i < opts.window; ++i) re[i] = src[i] * window[i];
    fft(re, im);
    for (std::size_t k = 0; k < n_fft_bins; ++k) power[k] = re[k] * re[k] + im[k] * im[k];
    auto out = feats.frames.row(f);
    for (std::size_t b = 0; b < opts.num_bins; ++b) {
      double e = 0.0;
      auto w = bank.row(b);
      for (std::size_t k = 0; k < n_fft_bins; ++k) e += w[k] * power[k];
      out[b] = std::log(e + opts.energy_floor);
    }
  }
  return feats;
}

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& why) {
    throw std::runtime_error(path.string() + ": " + why);
  };
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    fail("not a RIFF/WAVE file");
  std::size_t pos = 12;
  int channels = 0, rate = 0, bits = 0, format = 0;
  bool have_fmt = false;
  while (pos + 8 <= buf.size()) {
    const std::uint32_t size = get_le<std::uint32_t>(buf.data() + pos + 4);
    const unsigned char* body = buf.data() + pos + 8;
    if (pos + 8 + size > buf.size()) fail("truncated chunk");
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
      if (size < 16) fail("short fmt chunk");
      format = get_le<std::uint16_t>(body);
      channels = get_le<std::uint16_t>(body + 2);
      rate = static_cast<int>(get_le<std::uint32_t>(body + 4));
      bits = get_le<std::uint16_t>(body + 14);
      have_fmt = true;
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      if (!have_fmt) fail("data chunk before fmt chunk");
      if (format != 1 || bits != 16 || channels != 1) fail("only PCM-16 mono is supported");
      AudioClip clip;
      clip.sample_rate = rate;
      clip.samples.resize(size / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i)
        clip.samples[i] = get_le<std::int16_t>(body + 2 * i) / 32768.0;
      return clip;
    }
    pos += 8 + size + (size & 1);
  }
  fail("no data chunk");
  return {};
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  out.write("RIFF", 4);
  put_le<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_le<std::uint32_t>(out, 16);
  put_le<std::uint16_t>(out, 1);
  put_le<std::uint16_t>(out, 1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate * 2));
  put_le<std::uint16_t>(out, 2);
  put_le<std::uint16_t>(out, 16);
  out.write("data", 4);
  put_le<std::uint32_t>(out, data_bytes);
  for (double s : clip.samples) {
    const double clamped = std::clamp(s, -1.0, 32767.0 / 32768.0);
    put_le<std::int16_t>(out, static_cast<std::int16_t>(std::lround(clamped * 32768.0)));
  }
}

void write_features(const std::filesystem::path& path, const FeatureSequence& feats) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::ostringstream header;
  header.precision(17);
  header << "usm-features 1\n"
         << "rows " << feats.frames.rows << "\n"
         << "cols " << feats.frames.cols << "\n"
         << "hop " << feats.frame_hop << "\n"
         << "window " << feats.frame_window << "\n"
         << "end_header\n";
  out << header.str();
  for (double v : feats.frames.data) put_le<double>(out, v);
}

FeatureSequence read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  FeatureSequence feats;
  std::size_t rows = 0, cols = 0;
  std::getline(in, line);
  if (line != "usm-features 1") throw std::runtime_error(path.string() + ": bad feature header");
  while (std::getline(in, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "rows") ls >> rows;
    else if (key == "cols") ls >> cols;
    else if (key == "hop") ls >> feats.frame_hop;
    else if (key == "window") ls >> feats.frame_window;
  }
  feats.frames = Matrix(rows, cols);
  std::vector<unsigned char> bytes(rows * cols * sizeof(double));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size())
    throw std::runtime_error(path.string() + ": truncated feature data");
  for (std::size_t i = 0; i < rows * cols; ++i)
    feats.frames.data[i] = get_le<double>(bytes.data() + i * sizeof(double));
  return feats;
}

void normalize_utterance(Matrix& frames, double std_floor) {
  if (frames.rows == 0) return;
  const double n = static_cast<double>(frames.rows);
  for (std::size_t c = 0; c < frames.cols; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < frames.rows; ++r) mean += frames(r, c);
    mean /= n;
    double var = 0.0;
    for (std::size_t r = 0; r < frames.rows; ++r) var += (frames(r, c) - mean) * (frames(r, c) - mean);
    const double inv = 1.0 / std::max(std::sqrt(var / n), std_floor);
    for (std::size_t r = 0; r < frames.rows; ++r) frames(r, c) = (frames(r, c) - mean) * inv;
  }
}

}  // namespace usm
