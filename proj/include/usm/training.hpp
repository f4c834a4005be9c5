// In-memory training loop, per-stage step losses, decoding and evaluation.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "usm/adapters.hpp"
#include "usm/data.hpp"
#include "usm/model.hpp"
#include "usm/most.hpp"
#include "usm/optimizer.hpp"
#include "usm/scoring.hpp"

namespace usm {

struct StepLoss {
  Tensor total;
  std::vector<std::pair<std::string, double>> components;
};

using LossFn = std::function<StepLoss(std::size_t step)>;
using StepHook = std::function<void(std::size_t step, const StepLoss&)>;

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, double loss);
  std::size_t step;
};

// Runs steps [start, end): loss -> backward -> optimizer update -> hook.
// A non-finite loss throws TrainingDiverged before any update is applied.
void train_loop(Optimizer& optimizer, std::size_t start, std::size_t end, const LossFn& loss,
                const StepHook& hook = {});

// Encoder group (everything but the CTC head) and decoder group (CTC head).
Optimizer make_optimizer(const AsrModel& model, const AdamSettings& encoder,
                         const AdamSettings& decoder);

std::vector<PairedUtterance> to_paired(const TokenVocab& vocab, const std::vector<Utterance>& data);
std::vector<Matrix> to_speech(const std::vector<Utterance>& data);

template <typename T>
std::vector<T> take(const std::vector<T>& data, const std::vector<std::size_t>& indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data[i]);
  return out;
}

// BEST-RQ step; components: bestrq, accuracy (masked-frame argmax hit rate
// averaged over heads), masked_frames.
StepLoss pretrain_step_loss(const AsrModel& model, const RandomQuantizer& quantizer,
                            const std::vector<Matrix>& speech, std::size_t batch_size,
                            std::size_t step, std::uint64_t seed, const MaskSpec& mask,
                            const AttentionPattern& pattern);

// CTC step; components: ctc, infeasible.
StepLoss finetune_step_loss(const AsrModel& model, const std::vector<PairedUtterance>& data,
                            std::size_t batch_size, std::size_t step, std::uint64_t seed,
                            const AttentionPattern& pattern,
                            const std::vector<AdapterWeights>* adapters = nullptr);

std::string transcribe(const AsrModel& model, const Matrix& features, const AttentionPattern& pattern,
                       const std::vector<AdapterWeights>* adapters = nullptr);

struct Scores {
  EditStats words, chars;
  std::size_t utterances = 0;
};

struct EvalReport {
  std::map<std::string, Scores> per_language;
  Scores pooled;
  std::vector<std::string> hypotheses;
};

// Greedy decoding of every labeled utterance. With `adapted`, each
// utterance uses its language's adapters when registered.
EvalReport evaluate(const AsrModel& model, const std::vector<Utterance>& data,
                    const AttentionPattern& pattern, const AdaptedModel* adapted = nullptr);

}  // namespace usm
