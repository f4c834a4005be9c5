#include "usm/training.hpp"

#include <cmath>
#include <sstream>

#include "usm/ops.hpp"
#include "usm/random.hpp"

namespace usm {

namespace {
std::string diverged_message(std::size_t step, double loss) {
  std::ostringstream os;
  os << "training diverged at step " << step << " (loss " << loss << ")";
  return os.str();
}
}  // namespace

TrainingDiverged::TrainingDiverged(std::size_t s, double loss)
    : std::runtime_error(diverged_message(s, loss)), step(s) {}

void train_loop(Optimizer& optimizer, std::size_t start, std::size_t end, const LossFn& loss,
                const StepHook& hook) {
  for (std::size_t step = start; step < end; ++step) {
    StepLoss l = loss(step);
    const double value = l.total.item();
    if (!std::isfinite(value)) {
      optimizer.zero_grad();
      throw TrainingDiverged(step, value);
    }
    l.total.backward();
    optimizer.step();
    if (hook) hook(step, l);
  }
}

Optimizer make_optimizer(const AsrModel& model, const AdamSettings& encoder, const AdamSettings& decoder) {
  Optimizer opt;
  opt.add_group("encoder", model.encoder_parameters(), encoder);
  opt.add_group("decoder", model.decoder_parameters(), decoder);
  return opt;
}

std::vector<PairedUtterance> to_paired(const TokenVocab& vocab, const std::vector<Utterance>& data) {
  std::vector<PairedUtterance> out;
  for (const auto& u : data) {
    if (!u.labeled) continue;
    out.push_back({u.features, to_labels(vocab, u.transcript)});
  }
  return out;
}

std::vector<Matrix> to_speech(const std::vector<Utterance>& data) {
  std::vector<Matrix> out;
  out.reserve(data.size());
  for (const auto& u : data) out.push_back(u.features);
  return out;
}

StepLoss pretrain_step_loss(const AsrModel& model, const RandomQuantizer& quantizer,
                            const std::vector<Matrix>& speech, std::size_t batch_size,
                            std::size_t step, std::uint64_t seed, const MaskSpec& mask,
                            const AttentionPattern& pattern) {
  auto batch = take(speech, batch_indices(speech.size(), batch_size, step, derive_seed(seed, {0x5054})));
  MaskSpec spec = mask;
  spec.seed = derive_seed(seed, {0x4d534b, step});
  BestRqBatchLoss l = bestrq_batch_loss(model, quantizer, batch, spec, pattern);
  const double heads = static_cast<double>(model.config().num_codebooks);
  const double acc = l.masked_frames ? static_cast<double>(l.correct) / (heads * l.masked_frames) : 0.0;
  return {l.loss,
          {{"bestrq", l.loss.item()}, {"accuracy", acc}, {"masked_frames", static_cast<double>(l.masked_frames)}}};
}

StepLoss finetune_step_loss(const AsrModel& model, const std::vector<PairedUtterance>& data,
                            std::size_t batch_size, std::size_t step, std::uint64_t seed,
                            const AttentionPattern& pattern, const std::vector<AdapterWeights>* adapters) {
  auto batch = take(data, batch_indices(data.size(), batch_size, step, derive_seed(seed, {0x4654})));
  AsrBatchLoss l = asr_batch_loss(model, batch, pattern, adapters);
  return {l.loss, {{"ctc", l.loss.item()}, {"infeasible", static_cast<double>(l.infeasible)}}};
}

std::string transcribe(const AsrModel& model, const Matrix& features, const AttentionPattern& pattern,
                       const std::vector<AdapterWeights>* adapters) {
  NoGradGuard guard;
  Tensor logp = model.ctc_log_probs(model.encode(features.to_tensor(), pattern, adapters));
  return model.vocab().decode(ctc_greedy_decode(Matrix::from_tensor(logp)).ids);
}

EvalReport evaluate(const AsrModel& model, const std::vector<Utterance>& data,
                    const AttentionPattern& pattern, const AdaptedModel* adapted) {
  EvalReport report;
  for (const auto& u : data) {
    if (!u.labeled) continue;
    const std::vector<AdapterWeights>* adapters = nullptr;
    if (adapted && adapted->has_language(u.language)) adapters = &adapted->select(u.language).adapters();
    std::string hyp = transcribe(model, u.features, pattern, adapters);
    Scores& s = report.per_language[u.language];
    EditStats w = word_errors(u.transcript, hyp), c = char_errors(u.transcript, hyp);
    s.words += w;
    s.chars += c;
    ++s.utterances;
    report.pooled.words += w;
    report.pooled.chars += c;
    ++report.pooled.utterances;
    report.hypotheses.push_back(std::move(hyp));
  }
  return report;
}

}  // namespace usm
