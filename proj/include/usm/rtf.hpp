// Inference throughput: audio seconds processed per wall-clock second
// (1.0/RTF), with batches fully packed along time (no padding).

#pragma once

#include <string>
#include <vector>

#include "usm/features.hpp"
#include "usm/model.hpp"

namespace usm {

struct RtfOptions {
  std::size_t batch_size = 4;
  std::size_t repeats = 3;
  AttentionPattern pattern;
};

struct RtfReport {
  std::string pattern;
  std::size_t batch_size = 0;
  std::size_t batches = 0;
  std::size_t params = 0;
  std::string precision = "float64";
  std::string hardware;
  double audio_seconds = 0.0;
  std::vector<double> wall_seconds;  // one per repeat
  double median_wall_seconds = 0.0;
  double inverse_rtf = 0.0;          // audio_seconds / median wall
  double noise_band = 0.0;           // (max - min) / median over repeats
};

// Times featurization + encoder + greedy decoding over all clips.
RtfReport rtf_bench(const AsrModel& model, const std::vector<AudioClip>& clips, const RtfOptions& options);

std::string hardware_description();
std::string rtf_report_json(const RtfReport& report);

}  // namespace usm
