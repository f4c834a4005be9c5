// Synthetic "spoken token" corpus: every grapheme (including the word
// separator) is rendered as its own two-partial tone pattern, with per-clip
// pitch jitter, gain, and additive noise.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "usm/data.hpp"
#include "usm/features.hpp"

namespace usm {

struct SynthSpec {
  std::string letters = "abcdefgh";  // word characters; ' ' separates words
  std::size_t num_clips = 100;
  std::size_t min_words = 1, max_words = 4;
  std::size_t min_word_length = 1, max_word_length = 4;
  double min_token_seconds = 0.10, max_token_seconds = 0.18;
  double edge_silence_seconds = 0.15;
  double max_clip_seconds = 3.0;
  double noise_level = 0.01;  // white-noise standard deviation
  double min_gain = 0.4, max_gain = 1.0;
  double pitch_jitter = 0.04;  // relative, uniform per clip
  int sample_rate = 16000;
  std::string language = "syn";
  std::uint64_t seed = 1;

  void validate() const;
};

struct SynthClip {
  AudioClip audio;
  std::string transcript;
};

// Clip `index` of the corpus; depends only on (spec, index).
SynthClip synth_clip(const SynthSpec& spec, std::size_t index);

// Renders an arbitrary transcript over the SynthSpec graphemes.
AudioClip render_transcript(const SynthSpec& spec, const std::string& transcript, std::uint64_t seed);

// Joins clips with a rendered word separator between neighbours, so the
// transcript is the clip transcripts joined by ' '.
SynthClip concatenate(const SynthSpec& spec, const std::vector<SynthClip>& clips, std::uint64_t seed);

// Writes <dir>/<name>_<i>.wav for i in [first, first + count) and returns
// the manifest entries.
std::vector<ManifestEntry> write_synth_clips(const SynthSpec& spec, const std::filesystem::path& dir,
                                             const std::string& name, std::size_t first,
                                             std::size_t count, bool labeled = true);

// Evaluation set of `count` long clips, each a concatenation of `factor`
// consecutive clips starting at index `first`.
std::vector<ManifestEntry> write_synth_longform(const SynthSpec& spec, const std::filesystem::path& dir,
                                                const std::string& name, std::size_t first,
                                                std::size_t count, std::size_t factor);

// In-memory versions (no WAV round trip beyond PCM-16 quantization).
std::vector<Utterance> synth_utterances(const SynthSpec& spec, std::size_t first, std::size_t count);
std::vector<Utterance> synth_longform_utterances(const SynthSpec& spec, std::size_t first,
                                                 std::size_t count, std::size_t factor);

// Rounds samples to the PCM-16 grid, as a WAV write/read would.
void quantize_pcm16(AudioClip& clip);

}  // namespace usm
