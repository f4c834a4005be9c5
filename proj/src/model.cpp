#include "usm/model.hpp"

#include <map>
#include <sstream>
#include <stdexcept>

#include "usm/adapters.hpp"
#include "usm/ops.hpp"
#include "usm/random.hpp"

namespace usm {

std::string ModelConfig::fingerprint() const {
  std::ostringstream os;
  const auto& e = encoder;
  os << "L" << e.num_layers << "-d" << e.model_dim << "-h" << e.attention_heads << "-k"
     << e.conv_kernel_size << "-s" << e.subsampling_factor << "-in" << e.input_dim << "-ff"
     << e.ff_multiplier << "-rel" << e.relative_attention << "-cap" << e.rel_pos_cap << "-conv"
     << e.use_convolution << "-v" << graphemes.size() << "-N" << num_codebooks << "-c"
     << codebook_size << "-e" << codebook_dim << "-up" << text_upsample << "-sl" << speech_layer
     << "-te" << text_encoder;
  std::ostringstream full;
  full << os.str() << "-g" << std::hex
       << checksum(std::vector<double>(graphemes.begin(), graphemes.end()));
  return full.str();
}

TextEncoder::TextEncoder(std::size_t vocab_size, const ConformerConfig& cfg, std::size_t up,
                         Rng& rng)
    : upsample(up), layer(cfg, rng) {
  if (up == 0) throw std::invalid_argument("text upsampling factor must be >= 1");
  std::vector<double> table(vocab_size * cfg.model_dim);
  for (auto& v : table) v = rng.normal();
  embedding = Tensor::from({vocab_size, cfg.model_dim}, std::move(table), true);
}

Tensor TextEncoder::forward(const std::vector<std::size_t>& ids, const AttentionPattern& pattern) const {
  if (ids.empty()) throw std::invalid_argument("text encoder: empty token sequence");
  Tensor frames = ops::repeat_rows(ops::embedding(embedding, ids), upsample);
  return layer.forward(frames, pattern);
}

void TextEncoder::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".embedding", embedding);
  layer.collect(out, prefix + ".layer");
}

AsrModel::AsrModel(const ModelConfig& cfg, std::uint64_t seed)
    : config_(cfg), vocab_(cfg.graphemes) {
  cfg.encoder.validate();
  Rng rng(derive_seed(seed, {0x4d4f44454c}));
  encoder_ = ConformerEncoder(cfg.encoder, rng);
  Rng head_rng(derive_seed(seed, {0x48454144}));
  bestrq_heads_ = MultiSoftmaxHeads(cfg.encoder.model_dim, cfg.num_codebooks, cfg.codebook_size, head_rng);
  Rng ctc_rng(derive_seed(seed, {0x435443}));
  ctc_head_ = Linear(cfg.encoder.model_dim, vocab_.size(), ctc_rng);
  if (cfg.speech_layer) {
    Rng r(derive_seed(seed, {0x5350}));
    speech_layer_.emplace(cfg.encoder, r);
  }
  if (cfg.text_encoder) {
    Rng r(derive_seed(seed, {0x5445}));
    text_encoder_.emplace(vocab_.size(), cfg.encoder, cfg.text_upsample, r);
  }
}

Tensor AsrModel::speech_encode(const Tensor& features, const AttentionPattern& pattern) const {
  if (features.dim(1) != config_.encoder.input_dim)
    throw ShapeError("model: expected " + std::to_string(config_.encoder.input_dim) +
                     "-dim features, got " + shape_str(features.shape()));
  Tensor x = encoder_.stem().forward(features);
  if (speech_layer_) x = speech_layer_->forward(x, pattern);
  return x;
}

Tensor AsrModel::shared_encode(const Tensor& x, const AttentionPattern& pattern,
                               const std::vector<AdapterWeights>* adapters) const {
  return encoder_.forward_layers(x, pattern, adapters);
}

Tensor AsrModel::encode(const Tensor& features, const AttentionPattern& pattern,
                        const std::vector<AdapterWeights>* adapters) const {
  return shared_encode(speech_encode(features, pattern), pattern, adapters);
}

Tensor AsrModel::ctc_log_probs(const Tensor& encoded) const {
  return ops::log_softmax_rows(ctc_head_.forward(encoded));
}

NamedParams AsrModel::speech_encoder_parameters() const {
  NamedParams out;
  encoder_.stem().collect(out, "encoder.stem");
  if (speech_layer_) speech_layer_->collect(out, "speech_layer");
  return out;
}

NamedParams AsrModel::encoder_parameters() const {
  NamedParams out = speech_encoder_parameters();
  for (std::size_t i = 0; i < encoder_.layers().size(); ++i)
    encoder_.layers()[i].collect(out, "encoder.layers." + std::to_string(i));
  bestrq_heads_.collect(out, "bestrq_heads");
  if (text_encoder_) text_encoder_->collect(out, "text_encoder");
  return out;
}

NamedParams AsrModel::decoder_parameters() const {
  NamedParams out;
  ctc_head_.collect(out, "ctc_head");
  return out;
}

NamedParams AsrModel::parameters() const {
  NamedParams out = encoder_parameters();
  for (auto& p : decoder_parameters()) out.push_back(std::move(p));
  return out;
}

NamedParams AsrModel::inference_parameters() const {
  NamedParams out = speech_encoder_parameters();
  for (std::size_t i = 0; i < encoder_.layers().size(); ++i)
    encoder_.layers()[i].collect(out, "encoder.layers." + std::to_string(i));
  ctc_head_.collect(out, "ctc_head");
  return out;
}

AsrModel AsrModel::clone() const {
  AsrModel copy(config_, 0);
  copy.load_values(parameters());
  return copy;
}

std::vector<std::string> AsrModel::load_values(const NamedParams& source) {
  std::map<std::string, Tensor> mine;
  for (auto& [name, t] : parameters()) mine.emplace(name, t);
  std::vector<std::string> copied;
  std::vector<std::string> mismatched;
  for (const auto& [name, t] : source) {
    auto it = mine.find(name);
    if (it == mine.end()) continue;
    if (it->second.shape() != t.shape()) {
      mismatched.push_back(name + " " + shape_str(it->second.shape()) + " vs " + shape_str(t.shape()));
      continue;
    }
    auto dst = it->second.mutable_values();
    std::copy(t.values().begin(), t.values().end(), dst.begin());
    copied.push_back(name);
  }
  if (!mismatched.empty()) {
    std::string msg = "parameter shape mismatch:";
    for (const auto& m : mismatched) msg += " " + m + ";";
    throw ShapeError(msg);
  }
  return copied;
}

std::uint64_t params_checksum(const NamedParams& params) {
  std::uint64_t h = 0;
  for (const auto& [name, t] : params) h = h * 1099511628211ULL ^ checksum(t.values());
  return h;
}

}  // namespace usm
