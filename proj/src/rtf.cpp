#include "usm/rtf.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <json.hpp>
#include <stdexcept>
#include <thread>

#include "usm/data.hpp"
#include "usm/training.hpp"

namespace usm {

std::string hardware_description() {
  std::ifstream in("/proc/cpuinfo");
  std::string line, model = "unknown cpu";
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto colon = line.find(':');
      if (colon != std::string::npos) model = line.substr(colon + 2);
      break;
    }
  }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hw threads, 1 used";
}

RtfReport rtf_bench(const AsrModel& model, const std::vector<AudioClip>& clips, const RtfOptions& options) {
  if (options.batch_size == 0 || options.repeats == 0)
    throw std::invalid_argument("rtf: batch size and repeats must be positive");
  RtfReport r;
  r.pattern = options.pattern.to_string();
  r.batch_size = options.batch_size;
  r.batches = (clips.size() + options.batch_size - 1) / options.batch_size;
  r.params = count_params(model.inference_parameters());
  r.hardware = hardware_description();
  for (const auto& c : clips) r.audio_seconds += c.duration();

  for (std::size_t rep = 0; rep < options.repeats; ++rep) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t b = 0; b < r.batches; ++b) {
      const std::size_t end = std::min(clips.size(), (b + 1) * options.batch_size);
      for (std::size_t i = b * options.batch_size; i < end; ++i) {
        Matrix feats = featurize(clips[i]);
        if (feats.rows < model.config().encoder.subsampling_factor) continue;
        transcribe(model, feats, options.pattern);
      }
    }
    const std::chrono::duration<double> wall = std::chrono::steady_clock::now() - start;
    r.wall_seconds.push_back(wall.count());
  }
  std::vector<double> sorted = r.wall_seconds;
  std::sort(sorted.begin(), sorted.end());
  r.median_wall_seconds = sorted[sorted.size() / 2];
  r.inverse_rtf = r.median_wall_seconds > 0.0 ? r.audio_seconds / r.median_wall_seconds : 0.0;
  r.noise_band = r.median_wall_seconds > 0.0 ? (sorted.back() - sorted.front()) / r.median_wall_seconds : 0.0;
  return r;
}

std::string rtf_report_json(const RtfReport& r) {
  nlohmann::json j;
  j["event"] = "rtf";
  j["pattern"] = r.pattern;
  j["batch_size"] = r.batch_size;
  j["batches"] = r.batches;
  j["params"] = r.params;
  j["precision"] = r.precision;
  j["hardware"] = r.hardware;
  j["audio_seconds"] = r.audio_seconds;
  j["wall_seconds"] = r.wall_seconds;
  j["median_wall_seconds"] = r.median_wall_seconds;
  j["inverse_rtf"] = r.inverse_rtf;
  j["noise_band"] = r.noise_band;
  return j.dump();
}

}  // namespace usm
