// The full speech model: subsampling stem, optional speech-only conformer
// layer, shared conformer stack, BEST-RQ heads, CTC head and optional text
// encoder.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "usm/bestrq.hpp"
#include "usm/ctc.hpp"
#include "usm/encoder.hpp"
#include "usm/layers.hpp"

namespace usm {

struct AdapterWeights;

struct ModelConfig {
  ConformerConfig encoder;
  std::string graphemes = "abcdefgh ";
  std::size_t num_codebooks = 16;
  std::size_t codebook_size = 256;
  std::size_t codebook_dim = 16;
  std::size_t text_upsample = 4;
  bool speech_layer = false;
  bool text_encoder = false;

  // Stable identifier of everything that determines parameter shapes.
  std::string fingerprint() const;
};

// Grapheme embedding -> fixed repetition upsampler -> one conformer layer.
// Produces frames at the encoder frame rate, in the speech encoder space.
struct TextEncoder {
  Tensor embedding;  // [vocab, model_dim]
  std::size_t upsample = 4;
  ConformerBlock layer;

  TextEncoder() = default;
  TextEncoder(std::size_t vocab_size, const ConformerConfig& cfg, std::size_t upsample, Rng& rng);
  Tensor forward(const std::vector<std::size_t>& ids, const AttentionPattern& pattern) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

class AsrModel {
 public:
  AsrModel() = default;
  AsrModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const TokenVocab& vocab() const { return vocab_; }

  // Stem plus the speech-only layer when present.
  Tensor speech_encode(const Tensor& features, const AttentionPattern& pattern) const;
  // Full encoder output. adapters: one entry per shared layer, or null.
  Tensor encode(const Tensor& features, const AttentionPattern& pattern,
                const std::vector<AdapterWeights>* adapters = nullptr) const;
  Tensor shared_encode(const Tensor& x, const AttentionPattern& pattern,
                       const std::vector<AdapterWeights>* adapters = nullptr) const;
  Tensor ctc_log_probs(const Tensor& encoded) const;

  const ConformerEncoder& encoder() const { return encoder_; }
  const std::optional<ConformerBlock>& speech_layer() const { return speech_layer_; }
  const MultiSoftmaxHeads& bestrq_heads() const { return bestrq_heads_; }
  const Linear& ctc_head() const { return ctc_head_; }
  const std::optional<TextEncoder>& text_encoder() const { return text_encoder_; }

  // Every parameter, in a fixed order.
  NamedParams parameters() const;
  // Optimizer groups: the decoder is the CTC head, everything else is the
  // encoder group. Together they partition parameters().
  NamedParams encoder_parameters() const;
  NamedParams decoder_parameters() const;
  // Parameters used for speech recognition inference (stem, speech layer,
  // shared layers, CTC head).
  NamedParams inference_parameters() const;
  NamedParams speech_encoder_parameters() const;  // stem + speech layer

  // Deep copy.
  AsrModel clone() const;
  // Copies values for every name in `source` that exists here; shapes must
  // match. Returns the names copied.
  std::vector<std::string> load_values(const NamedParams& source);

 private:
  ModelConfig config_;
  TokenVocab vocab_;
  ConformerEncoder encoder_;
  std::optional<ConformerBlock> speech_layer_;
  MultiSoftmaxHeads bestrq_heads_;
  Linear ctc_head_;
  std::optional<TextEncoder> text_encoder_;
};

// Checksum over all listed parameter values, in order.
std::uint64_t params_checksum(const NamedParams& params);

}  // namespace usm
