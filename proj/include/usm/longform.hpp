// Short-segment training vs. long-form decoding, local vs. chunk-wise
// attention, over several seeds.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "usm/encoder.hpp"
#include "usm/scoring.hpp"
#include "usm/synth.hpp"

namespace usm {

struct LongFormExperimentSpec {
  SynthSpec corpus;
  std::size_t train_clips = 200;
  std::size_t short_eval_clips = 40;
  std::size_t long_eval_clips = 4;
  std::size_t concat_factor = 30;
  std::size_t num_layers = 6;
  AttentionPattern local = AttentionPattern::local(32, 32);
  AttentionPattern chunk = AttentionPattern::chunked(25);
  std::size_t steps = 800;
  std::size_t batch_size = 4;
  std::size_t eval_every = 200;
  double learning_rate = 2e-3;
  std::size_t warmup_steps = 100;
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  void validate() const;
};

struct LongFormRun {
  std::string pattern;
  std::uint64_t seed = 0;
  bool diverged = false;
  EditStats short_words, long_words;
  std::vector<std::pair<std::size_t, double>> curve;  // (step, long-form WER)
};

struct PatternSummary {
  std::string pattern;
  std::size_t surviving_seeds = 0;
  double median_short_wer = 0.0, median_long_wer = 0.0;
  double median_short_deletion = 0.0, median_long_deletion = 0.0;  // D/N
};

struct LongFormReport {
  std::vector<LongFormRun> runs;
  PatternSummary local, chunk;
  bool enough_seeds = false;
  bool chunk_not_worse = false;       // median long WER(chunk) <= median long WER(local)
  bool local_deletions_grow = false;  // local long-form D/N > short-form D/N
};

using ProgressFn = std::function<void(const std::string&)>;

LongFormReport run_longform(const LongFormExperimentSpec& spec, const ProgressFn& progress = {});

// step, pattern, seed, longform_wer (tab-separated, with header).
void write_longform_plot_data(const std::filesystem::path& path, const LongFormReport& report);
std::string format_longform_report(const LongFormReport& report);

}  // namespace usm
