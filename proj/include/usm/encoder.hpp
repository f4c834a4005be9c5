// Conformer encoder with global, local and chunk-wise self-attention.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "usm/layers.hpp"
#include "usm/tensor.hpp"

namespace usm {

enum class AttentionKind { Global, Local, Chunk };

struct AttentionPattern {
  AttentionKind kind = AttentionKind::Global;
  std::size_t left = 0;   // Local only
  std::size_t right = 0;  // Local only
  std::size_t chunk = 0;  // Chunk only

  static AttentionPattern global() { return {}; }
  static AttentionPattern local(std::size_t left, std::size_t right);
  static AttentionPattern chunked(std::size_t frames);

  // "global", "local:<left>:<right>", "chunk:<frames>"
  static AttentionPattern parse(const std::string& text);
  std::string to_string() const;

  // Inclusive key range visible from query position i in a length-T sequence.
  std::pair<std::size_t, std::size_t> key_range(std::size_t i, std::size_t T) const;

  friend bool operator==(const AttentionPattern&, const AttentionPattern&) = default;
};

// Row-major T x T mask: mask[i*T + j] != 0 iff query i may attend to key j.
std::vector<unsigned char> build_attention_mask(const AttentionPattern& pattern, std::size_t T);

struct ConformerConfig {
  std::size_t num_layers = 4;
  std::size_t model_dim = 32;
  std::size_t attention_heads = 4;
  std::size_t conv_kernel_size = 5;
  std::size_t subsampling_factor = 4;
  std::size_t input_dim = 128;
  std::size_t ff_multiplier = 4;
  bool relative_attention = true;
  // Relative distances are clipped to [-cap, cap].
  std::size_t rel_pos_cap = 16;
  bool use_convolution = true;

  void validate() const;
};

// Clip distance large enough for the pattern's own context.
std::size_t default_rel_pos_cap(const AttentionPattern& pattern, std::size_t global_cap = 64);

struct AdapterWeights;

struct FeedForward {
  LayerNorm norm;
  Linear expand;
  Linear project;

  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t multiplier, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct SelfAttention {
  LayerNorm norm;
  Linear query, key, value, output;
  Tensor rel_bias;  // [heads, 2*cap+1], undefined without relative attention
  std::size_t heads = 1;
  std::size_t cap = 0;

  SelfAttention() = default;
  SelfAttention(const ConformerConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, const AttentionPattern& pattern) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct ConvModule {
  LayerNorm norm;
  Linear pointwise_in;  // d -> 2d, gated linear unit
  Tensor depthwise_weight;  // [kernel, d]
  Tensor depthwise_bias;    // [d]
  LayerNorm mid_norm;
  Linear pointwise_out;

  ConvModule() = default;
  ConvModule(const ConformerConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

// x + FF/2 -> + MHSA -> + Conv -> + FF/2 -> LayerNorm. When adapters are
// given, each half feed-forward sublayer gets a parallel residual adapter.
struct ConformerBlock {
  FeedForward ff1;
  SelfAttention attention;
  std::optional<ConvModule> conv;
  FeedForward ff2;
  LayerNorm final_norm;

  ConformerBlock() = default;
  ConformerBlock(const ConformerConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, const AttentionPattern& pattern,
                 const AdapterWeights* adapters = nullptr) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

// Stacks `factor` consecutive frames and projects them: a strided
// convolution with kernel == stride == factor. Trailing frames that do not
// fill a group are dropped.
struct Subsampler {
  std::size_t factor = 4;
  Linear projection;
  LayerNorm norm;

  Subsampler() = default;
  Subsampler(const ConformerConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& features) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

class ConformerEncoder {
 public:
  ConformerEncoder() = default;
  ConformerEncoder(const ConformerConfig& cfg, Rng& rng);

  // features [T, input_dim] -> [T / subsampling, model_dim].
  // adapters, if non-null, holds one entry per layer.
  Tensor forward(const Tensor& features, const AttentionPattern& pattern,
                 const std::vector<AdapterWeights>* adapters = nullptr) const;
  Tensor forward_layers(const Tensor& x, const AttentionPattern& pattern,
                        const std::vector<AdapterWeights>* adapters = nullptr) const;

  const ConformerConfig& config() const { return config_; }
  const Subsampler& stem() const { return stem_; }
  const std::vector<ConformerBlock>& layers() const { return layers_; }
  void collect(NamedParams& out, const std::string& prefix) const;

 private:
  ConformerConfig config_;
  Subsampler stem_;
  std::vector<ConformerBlock> layers_;
};

// Closed-form parameter counts.
std::size_t conformer_block_param_count(const ConformerConfig& cfg);
std::size_t conformer_param_count(const ConformerConfig& cfg);

struct ReceptiveFieldReport {
  std::string pattern;
  std::size_t num_layers = 0;
  std::size_t conv_kernel_size = 0;
  bool attention_unbounded = false;
  // Frames reachable to the left/right of one output position (worst case
  // over positions). rf_frames = left + right; width = rf_frames + 1.
  std::size_t attention_left = 0, attention_right = 0;
  std::size_t attention_rf_frames = 0, attention_rf_width = 0;
  std::size_t conv_rf_frames = 0;
  std::size_t total_left = 0, total_right = 0;
  std::size_t total_rf_frames = 0, total_rf_width = 0;
  std::size_t frame_duration_ms = 40;
  std::size_t attention_rf_ms() const { return attention_rf_frames * frame_duration_ms; }
  std::size_t total_rf_ms() const { return total_rf_frames * frame_duration_ms; }
};

// sequence_length bounds the global pattern (0 = unbounded).
ReceptiveFieldReport receptive_field(const ConformerConfig& cfg, const AttentionPattern& pattern,
                                     std::size_t frame_duration_ms = 40,
                                     std::size_t sequence_length = 0);

// Aligned human-readable block followed by one machine-readable line:
//   rf pattern=<p> layers=<L> frames=<n> seconds=<s> total_frames=<n> total_seconds=<s>
std::string format_receptive_field(const ReceptiveFieldReport& report);

// "327.68" style exact rendering of a millisecond count.
std::string format_ms_as_seconds(std::size_t ms);

}  // namespace usm
