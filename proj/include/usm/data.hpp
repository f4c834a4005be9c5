// Manifests, utterance loading and deterministic batch order.
//
// Manifest: one record per line, tab-separated:
//   <audio path> <duration seconds> <transcript or "-"> <language tag>
// Relative audio paths are resolved against the manifest's directory.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "usm/ctc.hpp"
#include "usm/features.hpp"
#include "usm/matrix.hpp"

namespace usm {

struct ManifestEntry {
  std::filesystem::path audio;
  double duration = 0.0;
  std::optional<std::string> transcript;
  std::string language = "und";
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
// Audio paths under the manifest's directory are written relative to it.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

struct Utterance {
  std::string id;
  Matrix features;  // normalized log-mel, [T, 128]
  std::string transcript;  // empty when unlabeled
  bool labeled = false;
  std::string language;
  double duration = 0.0;
};

// Resample to 16 kHz, log-mel, per-utterance normalization.
Matrix featurize(const AudioClip& clip);

Utterance load_utterance(const ManifestEntry& entry);
std::vector<Utterance> load_utterances(const std::vector<ManifestEntry>& entries);

// Transcript -> label ids; throws on characters outside the vocabulary.
LabelSequence to_labels(const TokenVocab& vocab, const std::string& transcript);

// Indices for one batch: the dataset is walked in per-epoch shuffled order
// derived from (seed, epoch), so the batch for a step depends only on
// (size, batch, step, seed).
std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size,
                                       std::size_t step, std::uint64_t seed);

}  // namespace usm
