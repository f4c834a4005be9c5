// Noisy-student pseudo-labeling: teacher transcription, words-per-second
// filtering, and deterministic supervised/pseudo mixing.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "usm/data.hpp"
#include "usm/model.hpp"

namespace usm {

struct PseudoLabeledItem {
  std::filesystem::path audio;
  std::string language;
  std::string hypothesis;
  double duration = 0.0;
  double words_per_second = 0.0;
  bool kept = false;
};

double words_per_second(const std::string& hypothesis, double duration);

struct PseudoLabelRun {
  std::vector<PseudoLabeledItem> items;
  std::vector<std::string> skipped;  // "path: reason"
};

// Greedy CTC transcription of every readable clip; unreadable clips are
// skipped and recorded.
PseudoLabelRun pseudo_label(const AsrModel& teacher, const AttentionPattern& pattern,
                            const std::vector<ManifestEntry>& unlabeled);

// kept iff min_wps <= wps <= max_wps and the hypothesis is non-empty.
std::vector<PseudoLabeledItem> filter_pseudo(const std::vector<PseudoLabeledItem>& items,
                                             double min_wps, double max_wps);

// Tab-separated: path, duration, hypothesis, wps, kept, language. Fixed
// formatting so identical runs produce identical bytes.
void write_pseudo_manifest(const std::filesystem::path& path, const std::vector<PseudoLabeledItem>& items);
std::vector<PseudoLabeledItem> read_pseudo_manifest(const std::filesystem::path& path);

enum class Source { Supervised, Pseudo };

struct MixedItem {
  Source source;
  std::size_t index;
  friend bool operator==(const MixedItem&, const MixedItem&) = default;
};

// Batches drawn from two sources with an exact per-batch quota: batch b
// holds floor((b+1)·B·r) - floor(b·B·r) supervised items (r rounded to
// 1e-6), the rest pseudo. Each source is walked in a per-epoch shuffle and
// cycles when exhausted.
class MixedStream {
 public:
  MixedStream(std::size_t supervised_size, std::size_t pseudo_size, double supervised_ratio,
              std::size_t batch_size, std::uint64_t seed);

  std::vector<MixedItem> next_batch();
  std::size_t supervised_epoch() const { return epochs_[0]; }
  std::size_t pseudo_epoch() const { return epochs_[1]; }
  std::size_t batches() const { return batches_; }

 private:
  std::size_t draw(int source);
  std::size_t sizes_[2];
  std::size_t positions_[2] = {0, 0};
  std::size_t epochs_[2] = {0, 0};
  std::vector<std::size_t> orders_[2];
  std::uint64_t ratio_ppm_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t batches_ = 0;
};

}  // namespace usm
