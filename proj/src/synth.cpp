#include "usm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "usm/random.hpp"

namespace usm {

namespace fs = std::filesystem;

void SynthSpec::validate() const {
  if (letters.empty() || letters.find(' ') != std::string::npos)
    throw std::invalid_argument("synth: letters must be non-empty and exclude ' '");
  if (min_words == 0 || min_words > max_words) throw std::invalid_argument("synth: bad word count range");
  if (min_word_length == 0 || min_word_length > max_word_length)
    throw std::invalid_argument("synth: bad word length range");
  if (!(min_token_seconds > 0.0) || min_token_seconds > max_token_seconds)
    throw std::invalid_argument("synth: bad token duration range");
  if (!(min_gain > 0.0) || min_gain > max_gain) throw std::invalid_argument("synth: bad gain range");
  if (noise_level < 0.0 || pitch_jitter < 0.0 || pitch_jitter >= 0.5)
    throw std::invalid_argument("synth: bad noise or jitter");
  if (sample_rate <= 0) throw std::invalid_argument("synth: sample_rate must be positive");
}

namespace {

struct Voice {
  double low, high;  // partial frequencies at token start
  double sweep;      // relative change across the token
};

// Symbols 0..K-2 are letters, K-1 is the word separator. Base frequencies
// are spread log-uniformly over 300-3000 Hz.
Voice voice_for(std::size_t symbol, std::size_t num_symbols) {
  const double pos = num_symbols > 1 ? static_cast<double>(symbol) / static_cast<double>(num_symbols - 1) : 0.0;
  const double base = 300.0 * std::pow(10.0, pos);
  return {base, base * (symbol % 2 ? 1.6 : 2.3), 0.15 * (static_cast<double>(symbol % 3) - 1.0)};
}

std::size_t symbol_of(const SynthSpec& spec, char c) {
  if (c == ' ') return spec.letters.size();
  auto pos = spec.letters.find(c);
  if (pos == std::string::npos) throw std::invalid_argument(std::string("synth: unknown grapheme '") + c + "'");
  return pos;
}

void append_token(std::vector<double>& out, const SynthSpec& spec, char c, double pitch, double gain, Rng& rng) {
  const double sr = spec.sample_rate;
  const double dur = rng.uniform(spec.min_token_seconds, spec.max_token_seconds);
  const auto n = static_cast<std::size_t>(std::llround(dur * sr));
  const Voice v = voice_for(symbol_of(spec, c), spec.letters.size() + 1);
  const double ramp = std::min(0.010 * sr, n / 2.0);
  double ph1 = rng.uniform(0.0, 2.0 * std::numbers::pi), ph2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(n);
    const double warp = pitch * (1.0 + v.sweep * (frac - 0.5));
    ph1 += 2.0 * std::numbers::pi * v.low * warp / sr;
    ph2 += 2.0 * std::numbers::pi * v.high * warp / sr;
    double env = 1.0;
    if (i < ramp) env = 0.5 - 0.5 * std::cos(std::numbers::pi * i / ramp);
    if (n - 1 - i < ramp) env = std::min(env, 0.5 - 0.5 * std::cos(std::numbers::pi * (n - 1 - i) / ramp));
    out.push_back(gain * env * (0.5 * std::sin(ph1) + 0.3 * std::sin(ph2)));
  }
}

void append_silence(std::vector<double>& out, double seconds, int sample_rate) {
  out.insert(out.end(), static_cast<std::size_t>(std::llround(seconds * sample_rate)), 0.0);
}

void add_noise(std::vector<double>& samples, double level, Rng& rng) {
  if (level <= 0.0) return;
  for (auto& s : samples) s += rng.normal(0.0, level);
}

AudioClip render(const SynthSpec& spec, const std::string& text, Rng& rng, bool edges) {
  AudioClip clip;
  clip.sample_rate = spec.sample_rate;
  const double pitch = 1.0 + rng.uniform(-spec.pitch_jitter, spec.pitch_jitter);
  const double gain = rng.uniform(spec.min_gain, spec.max_gain);
  if (edges) append_silence(clip.samples, spec.edge_silence_seconds * rng.uniform(0.5, 1.5), spec.sample_rate);
  for (char c : text) append_token(clip.samples, spec, c, pitch, gain, rng);
  if (edges) append_silence(clip.samples, spec.edge_silence_seconds * rng.uniform(0.5, 1.5), spec.sample_rate);
  add_noise(clip.samples, spec.noise_level, rng);
  return clip;
}

std::string draw_transcript(const SynthSpec& spec, Rng& rng) {
  const auto words = static_cast<std::size_t>(rng.integer(spec.min_words, spec.max_words));
  std::vector<std::string> out;
  for (std::size_t w = 0; w < words; ++w) {
    const auto len = static_cast<std::size_t>(rng.integer(spec.min_word_length, spec.max_word_length));
    std::string word;
    for (std::size_t i = 0; i < len; ++i)
      word.push_back(spec.letters[static_cast<std::size_t>(rng.integer(0, spec.letters.size() - 1))]);
    out.push_back(word);
  }
  // Worst-case duration must fit the clip budget; drop trailing words.
  auto worst = [&] {
    std::size_t tokens = out.size() - 1;
    for (const auto& w : out) tokens += w.size();
    return tokens * spec.max_token_seconds + 3.0 * spec.edge_silence_seconds;
  };
  while (out.size() > 1 && worst() > spec.max_clip_seconds) out.pop_back();
  std::string text;
  for (std::size_t i = 0; i < out.size(); ++i) text += (i ? " " : "") + out[i];
  return text;
}

std::string clip_name(const std::string& name, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%05zu.wav", i);
  return name + buf;
}

}  // namespace

void quantize_pcm16(AudioClip& clip) {
  for (auto& s : clip.samples)
    s = static_cast<double>(std::lround(std::clamp(s, -1.0, 32767.0 / 32768.0) * 32768.0)) / 32768.0;
}

SynthClip synth_clip(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, {0x434c4950, index}));
  SynthClip out;
  out.transcript = draw_transcript(spec, rng);
  out.audio = render(spec, out.transcript, rng, true);
  quantize_pcm16(out.audio);
  return out;
}

AudioClip render_transcript(const SynthSpec& spec, const std::string& transcript, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, {0x52454e44}));
  AudioClip clip = render(spec, transcript, rng, true);
  quantize_pcm16(clip);
  return clip;
}

SynthClip concatenate(const SynthSpec& spec, const std::vector<SynthClip>& clips, std::uint64_t seed) {
  SynthClip out;
  out.audio.sample_rate = spec.sample_rate;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (clips[i].audio.sample_rate != spec.sample_rate)
      throw std::invalid_argument("concatenate: sample rate mismatch");
    if (i > 0) {
      Rng rng(derive_seed(seed, {0x534550, i}));
      AudioClip sep = render(spec, " ", rng, false);
      quantize_pcm16(sep);
      out.audio.samples.insert(out.audio.samples.end(), sep.samples.begin(), sep.samples.end());
      out.transcript += ' ';
    }
    out.audio.samples.insert(out.audio.samples.end(), clips[i].audio.samples.begin(),
                             clips[i].audio.samples.end());
    out.transcript += clips[i].transcript;
  }
  return out;
}

std::vector<ManifestEntry> write_synth_clips(const SynthSpec& spec, const fs::path& dir,
                                             const std::string& name, std::size_t first,
                                             std::size_t count, bool labeled) {
  fs::create_directories(dir);
  std::vector<ManifestEntry> out;
  for (std::size_t i = first; i < first + count; ++i) {
    SynthClip clip = synth_clip(spec, i);
    ManifestEntry e;
    e.audio = dir / clip_name(name, i);
    write_wav(e.audio, clip.audio);
    e.duration = clip.audio.duration();
    if (labeled) e.transcript = clip.transcript;
    e.language = spec.language;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ManifestEntry> write_synth_longform(const SynthSpec& spec, const fs::path& dir,
                                                const std::string& name, std::size_t first,
                                                std::size_t count, std::size_t factor) {
  fs::create_directories(dir);
  std::vector<ManifestEntry> out;
  for (std::size_t j = 0; j < count; ++j) {
    std::vector<SynthClip> parts;
    for (std::size_t k = 0; k < factor; ++k) parts.push_back(synth_clip(spec, first + j * factor + k));
    SynthClip joined = concatenate(spec, parts, derive_seed(spec.seed, {0x4c4f4e47, j}));
    ManifestEntry e;
    e.audio = dir / clip_name(name, j);
    write_wav(e.audio, joined.audio);
    e.duration = joined.audio.duration();
    e.transcript = joined.transcript;
    e.language = spec.language;
    out.push_back(std::move(e));
  }
  return out;
}

namespace {
Utterance to_utterance(const SynthSpec& spec, const SynthClip& clip, std::string id) {
  Utterance u;
  u.id = std::move(id);
  u.features = featurize(clip.audio);
  u.transcript = clip.transcript;
  u.labeled = true;
  u.language = spec.language;
  u.duration = clip.audio.duration();
  return u;
}
}  // namespace

std::vector<Utterance> synth_utterances(const SynthSpec& spec, std::size_t first, std::size_t count) {
  std::vector<Utterance> out;
  for (std::size_t i = first; i < first + count; ++i)
    out.push_back(to_utterance(spec, synth_clip(spec, i), clip_name("clip", i)));
  return out;
}

std::vector<Utterance> synth_longform_utterances(const SynthSpec& spec, std::size_t first,
                                                 std::size_t count, std::size_t factor) {
  std::vector<Utterance> out;
  for (std::size_t j = 0; j < count; ++j) {
    std::vector<SynthClip> parts;
    for (std::size_t k = 0; k < factor; ++k) parts.push_back(synth_clip(spec, first + j * factor + k));
    SynthClip joined = concatenate(spec, parts, derive_seed(spec.seed, {0x4c4f4e47, j}));
    out.push_back(to_utterance(spec, joined, clip_name("long", j)));
  }
  return out;
}

}  // namespace usm
