#include "usm/most.hpp"

#include <cmath>
#include <stdexcept>

#include "usm/ops.hpp"
#include "usm/random.hpp"

namespace usm {

MostBatchSizes MostBatchSizes::scaled(double factor) {
  auto size = [&](double full) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(full * factor)));
  };
  return {size(4096), size(8192), size(1024)};
}

void MostLossWeights::validate() const {
  for (double w : {bestrq, asr, consistency, reconstruction})
    if (!(w >= 0.0) || !std::isfinite(w))
      throw std::invalid_argument("MOST loss weights must be finite and nonnegative");
  if (bestrq + asr + consistency + reconstruction <= 0.0)
    throw std::invalid_argument("MOST loss weights: at least one must be positive");
}

std::size_t curriculum_gate(std::size_t total_steps) {
  return static_cast<std::size_t>(std::llround(0.17 * static_cast<double>(total_steps)));
}

Tensor upsample_text(const Tensor& token_embeddings, std::size_t factor) {
  return ops::repeat_rows(token_embeddings, factor);
}

std::optional<Tensor> consistency_loss(const AsrModel& model, const Matrix& features,
                                       const LabelSequence& labels,
                                       const AttentionPattern& pattern) {
  if (!model.text_encoder()) throw std::logic_error("consistency_loss: model has no text encoder");
  if (labels.ids.empty()) return std::nullopt;
  Tensor speech = ops::stop_gradient(model.speech_encode(features.to_tensor(), pattern));
  Tensor text = model.text_encoder()->forward(labels.ids, pattern);
  return ops::mse(ops::interpolate_rows(text, speech.dim(0)), speech);
}

CtcResult text_reconstruction_loss(const AsrModel& model, const LabelSequence& input,
                                   const LabelSequence& target, const TextMask& mask,
                                   const AttentionPattern& pattern) {
  if (!model.text_encoder())
    throw std::logic_error("text_reconstruction_loss: model has no text encoder");
  Tensor frames = model.text_encoder()->forward(input.ids, pattern);
  const std::size_t T = frames.dim(0), d = frames.dim(1);
  auto frame_mask = sample_mask(T, mask.span_frames, mask.start_probability, mask.seed);
  Rng rng(derive_seed(mask.seed, {0x4e4f495345}));
  std::vector<double> noise(T * d);
  for (auto& v : noise) v = rng.normal(mask.noise_mean, mask.noise_std);
  Tensor masked = ops::replace_rows(frames, frame_mask, Tensor::from({T, d}, std::move(noise)));
  return ctc_loss(model.ctc_log_probs(model.shared_encode(masked, pattern)), target);
}

AsrBatchLoss asr_batch_loss(const AsrModel& model, const std::vector<PairedUtterance>& batch,
                            const AttentionPattern& pattern,
                            const std::vector<AdapterWeights>* adapters) {
  AsrBatchLoss out;
  std::vector<Tensor> terms;
  for (const auto& item : batch) {
    Tensor logp = model.ctc_log_probs(model.encode(item.features.to_tensor(), pattern, adapters));
    CtcResult r = ctc_loss(logp, item.labels);
    if (r.infeasible || item.labels.ids.empty()) {
      ++out.infeasible;
      continue;
    }
    terms.push_back(ops::scale(r.loss, 1.0 / static_cast<double>(item.labels.ids.size())));
  }
  out.used = terms.size();
  if (terms.empty()) {
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  out.loss = ops::scale(total, 1.0 / static_cast<double>(terms.size()));
  return out;
}

BestRqBatchLoss bestrq_batch_loss(const AsrModel& model, const RandomQuantizer& quantizer,
                                  const std::vector<Matrix>& features, const MaskSpec& mask,
                                  const AttentionPattern& pattern) {
  BestRqBatchLoss out;
  const std::size_t factor = model.config().encoder.subsampling_factor;
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < features.size(); ++i) {
    MaskSpec spec = mask;
    spec.seed = derive_seed(mask.seed, {i});
    MaskResult masked = apply_mask(features[i], 0.010, spec);
    QuantizedTargets targets = quantize(stack_frames(features[i], factor), quantizer);
    targets.mask_indices = subsample_mask(masked.frame_mask, factor, targets.num_frames());
    BestRqLoss l = bestrq_loss(model.encode(masked.masked.to_tensor(), pattern),
                               model.bestrq_heads(), targets);
    if (l.empty_mask) {
      ++out.empty_masks;
      continue;
    }
    out.masked_frames += l.masked_frames;
    out.correct += l.correct;
    terms.push_back(l.loss);
  }
  if (terms.empty()) {
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  out.loss = ops::scale(total, 1.0 / static_cast<double>(terms.size()));
  return out;
}

MostStepResult most_step(const AsrModel& model, const RandomQuantizer& quantizer,
                         const MostBatch& batch, const MostOptions& options, std::size_t step) {
  options.weights.validate();
  MostStepResult out;
  std::vector<Tensor> terms;
  const auto& w = options.weights;

  if (batch.unlabeled_speech.empty()) {
    out.missing_speech = true;
  } else {
    MaskSpec spec = options.speech_mask;
    spec.seed = derive_seed(spec.seed, {0x5351, step});
    auto l = bestrq_batch_loss(model, quantizer, batch.unlabeled_speech, spec, options.pattern);
    out.bestrq = l.loss.item();
    if (w.bestrq > 0.0) terms.push_back(ops::scale(l.loss, w.bestrq));
  }

  if (batch.paired.empty()) {
    out.missing_paired = true;
  } else {
    auto asr = asr_batch_loss(model, batch.paired, options.pattern);
    out.asr = asr.loss.item();
    if (w.asr > 0.0) terms.push_back(ops::scale(asr.loss, w.asr));

    std::vector<Tensor> cons;
    for (const auto& item : batch.paired) {
      auto c = consistency_loss(model, item.features, item.labels, options.pattern);
      if (c)
        cons.push_back(*c);
      else
        ++out.skipped_consistency;
    }
    if (!cons.empty()) {
      Tensor sum = cons[0];
      for (std::size_t i = 1; i < cons.size(); ++i) sum = ops::add(sum, cons[i]);
      Tensor mean = ops::scale(sum, 1.0 / static_cast<double>(cons.size()));
      out.consistency = mean.item();
      if (w.consistency > 0.0) terms.push_back(ops::scale(mean, w.consistency));
    }
  }

  out.gate_open = step >= options.gate_step;
  if (batch.unlabeled_text.empty()) {
    out.missing_text = true;
  } else if (out.gate_open) {
    std::vector<Tensor> rec;
    for (std::size_t i = 0; i < batch.unlabeled_text.size(); ++i) {
      TextMask mask = options.text_mask;
      mask.seed = derive_seed(mask.seed, {0x5458, step, i});
      CtcResult r = text_reconstruction_loss(model, batch.unlabeled_text[i], mask, options.pattern);
      if (r.infeasible) continue;
      rec.push_back(ops::scale(r.loss, 1.0 / static_cast<double>(batch.unlabeled_text[i].ids.size())));
    }
    if (!rec.empty()) {
      Tensor sum = rec[0];
      for (std::size_t i = 1; i < rec.size(); ++i) sum = ops::add(sum, rec[i]);
      Tensor mean = ops::scale(sum, 1.0 / static_cast<double>(rec.size()));
      out.reconstruction = mean.item();
      if (w.reconstruction > 0.0) terms.push_back(ops::scale(mean, w.reconstruction));
    }
  }

  if (terms.empty()) {
    out.total = Tensor::scalar(0.0);
  } else {
    out.total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) out.total = ops::add(out.total, terms[i]);
  }
  return out;
}

}  // namespace usm
