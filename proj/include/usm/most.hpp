// Joint speech/text pre-training: BEST-RQ on unlabeled speech, CTC on paired
// data, speech-text consistency, and masked text reconstruction gated by a
// curriculum step.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "usm/bestrq.hpp"
#include "usm/ctc.hpp"
#include "usm/matrix.hpp"
#include "usm/model.hpp"

namespace usm {

struct PairedUtterance {
  Matrix features;  // [T, 128] normalized log-mel
  LabelSequence labels;
};

struct MostBatch {
  std::vector<Matrix> unlabeled_speech;
  std::vector<PairedUtterance> paired;
  std::vector<LabelSequence> unlabeled_text;
};

struct MostBatchSizes {
  std::size_t unlabeled_speech = 4;
  std::size_t paired = 8;
  std::size_t unlabeled_text = 1;

  // Scales the 4096/8192/1024 mix by `factor`, keeping each size >= 1.
  static MostBatchSizes scaled(double factor);
};

struct MostLossWeights {
  double bestrq = 1.0;
  double asr = 1.0;
  double consistency = 1.0;
  double reconstruction = 1.0;

  void validate() const;
};

// round(0.17 * total_steps).
std::size_t curriculum_gate(std::size_t total_steps);

// Each row repeated `factor` times in order.
Tensor upsample_text(const Tensor& token_embeddings, std::size_t factor);

// MSE between the text encoder output (linearly interpolated to the speech
// length) and the detached speech encoder output. Returns nullopt for an
// empty transcript.
std::optional<Tensor> consistency_loss(const AsrModel& model, const Matrix& features,
                                       const LabelSequence& labels,
                                       const AttentionPattern& pattern);

struct TextMask {
  double start_probability = 0.01;
  std::size_t span_frames = 10;  // 400 ms at the 40 ms encoder rate
  double noise_mean = 0.0;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
};

// input -> text encoder -> span mask with noise -> shared encoder -> CTC
// against `target`.
CtcResult text_reconstruction_loss(const AsrModel& model, const LabelSequence& input,
                                   const LabelSequence& target, const TextMask& mask,
                                   const AttentionPattern& pattern);
inline CtcResult text_reconstruction_loss(const AsrModel& model, const LabelSequence& text,
                                          const TextMask& mask, const AttentionPattern& pattern) {
  return text_reconstruction_loss(model, text, text, mask, pattern);
}

// Mean over the batch of CTC NLL divided by target length. Infeasible items
// are skipped and counted.
struct AsrBatchLoss {
  Tensor loss;
  std::size_t used = 0;
  std::size_t infeasible = 0;
};
AsrBatchLoss asr_batch_loss(const AsrModel& model, const std::vector<PairedUtterance>& batch,
                            const AttentionPattern& pattern,
                            const std::vector<AdapterWeights>* adapters = nullptr);

// BEST-RQ loss averaged over the utterances that have a non-empty mask.
struct BestRqBatchLoss {
  Tensor loss;
  std::size_t masked_frames = 0;
  std::size_t correct = 0;
  std::size_t empty_masks = 0;
};
BestRqBatchLoss bestrq_batch_loss(const AsrModel& model, const RandomQuantizer& quantizer,
                                  const std::vector<Matrix>& features, const MaskSpec& mask,
                                  const AttentionPattern& pattern);

struct MostStepResult {
  Tensor total;
  double bestrq = 0.0, asr = 0.0, consistency = 0.0, reconstruction = 0.0;
  bool missing_speech = false, missing_paired = false, missing_text = false;
  bool gate_open = false;
  std::size_t skipped_consistency = 0;
};

struct MostOptions {
  MostLossWeights weights;
  std::size_t gate_step = 0;
  MaskSpec speech_mask;
  TextMask text_mask;
  AttentionPattern pattern;
};

// Builds the weighted objective for one step. Masking seeds are derived
// from (options.speech_mask.seed, step) so a step is reproducible.
MostStepResult most_step(const AsrModel& model, const RandomQuantizer& quantizer,
                         const MostBatch& batch, const MostOptions& options, std::size_t step);

}  // namespace usm
