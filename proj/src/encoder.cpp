#include "usm/encoder.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "usm/adapters.hpp"
#include "usm/ops.hpp"

namespace usm {

AttentionPattern AttentionPattern::local(std::size_t left, std::size_t right) {
  AttentionPattern p;
  p.kind = AttentionKind::Local;
  p.left = left;
  p.right = right;
  return p;
}

AttentionPattern AttentionPattern::chunked(std::size_t frames) {
  if (frames == 0) throw std::invalid_argument("chunk size must be positive");
  AttentionPattern p;
  p.kind = AttentionKind::Chunk;
  p.chunk = frames;
  return p;
}

AttentionPattern AttentionPattern::parse(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ':');) parts.push_back(item);
  auto number = [&](const std::string& s) {
    std::size_t pos = 0;
    unsigned long v = std::stoul(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("bad attention pattern: " + text);
    return static_cast<std::size_t>(v);
  };
  if (parts.size() == 1 && parts[0] == "global") return global();
  if (parts.size() == 3 && parts[0] == "local") return local(number(parts[1]), number(parts[2]));
  if (parts.size() == 2 && parts[0] == "chunk") return chunked(number(parts[1]));
  throw std::invalid_argument("bad attention pattern '" + text +
                              "' (expected global, local:L:R or chunk:S)");
}

std::string AttentionPattern::to_string() const {
  switch (kind) {
    case AttentionKind::Global: return "global";
    case AttentionKind::Local: return "local:" + std::to_string(left) + ":" + std::to_string(right);
    case AttentionKind::Chunk: return "chunk:" + std::to_string(chunk);
  }
  return "?";
}

std::pair<std::size_t, std::size_t> AttentionPattern::key_range(std::size_t i, std::size_t T) const {
  switch (kind) {
    case AttentionKind::Global: return {0, T - 1};
    case AttentionKind::Local: return {i >= left ? i - left : 0, std::min(T - 1, i + right)};
    case AttentionKind::Chunk: {
      const std::size_t begin = (i / chunk) * chunk;
      return {begin, std::min(T - 1, begin + chunk - 1)};
    }
  }
  return {0, T - 1};
}

std::vector<unsigned char> build_attention_mask(const AttentionPattern& pattern, std::size_t T) {
  std::vector<unsigned char> mask(T * T, 0);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < T; ++j) {
      bool on = false;
      switch (pattern.kind) {
        case AttentionKind::Global: on = true; break;
        case AttentionKind::Local: {
          const long rel = static_cast<long>(j) - static_cast<long>(i);
          on = rel >= -static_cast<long>(pattern.left) && rel <= static_cast<long>(pattern.right);
          break;
        }
        case AttentionKind::Chunk: on = i / pattern.chunk == j / pattern.chunk; break;
      }
      mask[i * T + j] = on ? 1 : 0;
    }
  }
  return mask;
}

void ConformerConfig::validate() const {
  if (num_layers == 0 || model_dim == 0 || attention_heads == 0)
    throw std::invalid_argument("conformer config: layers, dim and heads must be positive");
  if (model_dim % attention_heads != 0)
    throw std::invalid_argument("conformer config: model_dim " + std::to_string(model_dim) +
                                " not divisible by heads " + std::to_string(attention_heads));
  if (conv_kernel_size % 2 == 0)
    throw std::invalid_argument("conformer config: conv kernel must be odd");
  if (subsampling_factor == 0) throw std::invalid_argument("conformer config: zero subsampling");
}

std::size_t default_rel_pos_cap(const AttentionPattern& pattern, std::size_t global_cap) {
  switch (pattern.kind) {
    case AttentionKind::Local: return std::max<std::size_t>(1, std::max(pattern.left, pattern.right));
    case AttentionKind::Chunk: return pattern.chunk;
    case AttentionKind::Global: return global_cap;
  }
  return global_cap;
}

FeedForward::FeedForward(std::size_t dim, std::size_t multiplier, Rng& rng)
    : norm(dim), expand(dim, dim * multiplier, rng), project(dim * multiplier, dim, rng) {}

Tensor FeedForward::forward(const Tensor& x) const {
  return project.forward(ops::swish(expand.forward(norm.forward(x))));
}

void FeedForward::collect(NamedParams& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  expand.collect(out, prefix + ".expand");
  project.collect(out, prefix + ".project");
}

SelfAttention::SelfAttention(const ConformerConfig& cfg, Rng& rng)
    : norm(cfg.model_dim),
      query(cfg.model_dim, cfg.model_dim, rng),
      key(cfg.model_dim, cfg.model_dim, rng),
      value(cfg.model_dim, cfg.model_dim, rng),
      output(cfg.model_dim, cfg.model_dim, rng),
      heads(cfg.attention_heads),
      cap(cfg.rel_pos_cap) {
  if (cfg.relative_attention) rel_bias = Tensor::zeros({heads, 2 * cap + 1}, true);
}

Tensor SelfAttention::forward(const Tensor& x, const AttentionPattern& pattern) const {
  Tensor h = norm.forward(x);
  const std::size_t T = x.dim(0);
  std::vector<std::size_t> lo(T), hi(T);
  for (std::size_t i = 0; i < T; ++i) std::tie(lo[i], hi[i]) = pattern.key_range(i, T);
  Tensor attended = ops::banded_attention(query.forward(h), key.forward(h), value.forward(h),
                                          rel_bias, heads, cap, lo, hi);
  return output.forward(attended);
}

void SelfAttention::collect(NamedParams& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  output.collect(out, prefix + ".output");
  if (rel_bias.defined()) out.emplace_back(prefix + ".rel_bias", rel_bias);
}

ConvModule::ConvModule(const ConformerConfig& cfg, Rng& rng)
    : norm(cfg.model_dim),
      pointwise_in(cfg.model_dim, 2 * cfg.model_dim, rng),
      mid_norm(cfg.model_dim),
      pointwise_out(cfg.model_dim, cfg.model_dim, rng) {
  const std::size_t k = cfg.conv_kernel_size, d = cfg.model_dim;
  std::vector<double> w(k * d);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(k));
  for (auto& v : w) v = rng.normal(0.0, stddev);
  depthwise_weight = Tensor::from({k, d}, std::move(w), true);
  depthwise_bias = Tensor::zeros({d}, true);
}

Tensor ConvModule::forward(const Tensor& x) const {
  const std::size_t d = x.dim(1);
  Tensor gated = pointwise_in.forward(norm.forward(x));
  Tensor glu = ops::mul(ops::slice_cols(gated, 0, d), ops::sigmoid(ops::slice_cols(gated, d, d)));
  Tensor conv = ops::depthwise_conv1d(glu, depthwise_weight, depthwise_bias);
  return pointwise_out.forward(ops::swish(mid_norm.forward(conv)));
}

void ConvModule::collect(NamedParams& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  pointwise_in.collect(out, prefix + ".pointwise_in");
  out.emplace_back(prefix + ".depthwise.weight", depthwise_weight);
  out.emplace_back(prefix + ".depthwise.bias", depthwise_bias);
  mid_norm.collect(out, prefix + ".mid_norm");
  pointwise_out.collect(out, prefix + ".pointwise_out");
}

ConformerBlock::ConformerBlock(const ConformerConfig& cfg, Rng& rng)
    : ff1(cfg.model_dim, cfg.ff_multiplier, rng),
      attention(cfg, rng),
      ff2(cfg.model_dim, cfg.ff_multiplier, rng),
      final_norm(cfg.model_dim) {
  if (cfg.use_convolution) conv.emplace(cfg, rng);
}

Tensor ConformerBlock::forward(const Tensor& x, const AttentionPattern& pattern,
                               const AdapterWeights* adapters) const {
  Tensor h = ops::add(x, ops::scale(ff1.forward(x), 0.5));
  if (adapters) h = ops::add(h, adapters->ff1.forward(x));
  h = ops::add(h, attention.forward(h, pattern));
  if (conv) h = ops::add(h, conv->forward(h));
  Tensor out = ops::add(h, ops::scale(ff2.forward(h), 0.5));
  if (adapters) out = ops::add(out, adapters->ff2.forward(h));
  return final_norm.forward(out);
}

void ConformerBlock::collect(NamedParams& out, const std::string& prefix) const {
  ff1.collect(out, prefix + ".ff1");
  attention.collect(out, prefix + ".attention");
  if (conv) conv->collect(out, prefix + ".conv");
  ff2.collect(out, prefix + ".ff2");
  final_norm.collect(out, prefix + ".final_norm");
}

Subsampler::Subsampler(const ConformerConfig& cfg, Rng& rng)
    : factor(cfg.subsampling_factor),
      projection(cfg.input_dim * cfg.subsampling_factor, cfg.model_dim, rng),
      norm(cfg.model_dim) {}

Tensor Subsampler::forward(const Tensor& features) const {
  const std::size_t T = features.dim(0), D = features.dim(1);
  const std::size_t groups = T / factor;
  if (groups == 0)
    throw ShapeError("subsampling: " + std::to_string(T) + " frames yield no encoder frame at factor " +
                     std::to_string(factor));
  Tensor usable = groups * factor == T ? features : ops::slice_rows(features, 0, groups * factor);
  Tensor stacked = ops::reshape(usable, {groups, D * factor});
  return norm.forward(projection.forward(stacked));
}

void Subsampler::collect(NamedParams& out, const std::string& prefix) const {
  projection.collect(out, prefix + ".projection");
  norm.collect(out, prefix + ".norm");
}

ConformerEncoder::ConformerEncoder(const ConformerConfig& cfg, Rng& rng)
    : config_(cfg), stem_(cfg, rng) {
  cfg.validate();
  layers_.reserve(cfg.num_layers);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) layers_.emplace_back(cfg, rng);
}

Tensor ConformerEncoder::forward(const Tensor& features, const AttentionPattern& pattern,
                                 const std::vector<AdapterWeights>* adapters) const {
  if (features.dim(1) != config_.input_dim)
    throw ShapeError("encoder: expected " + std::to_string(config_.input_dim) +
                     "-dim features, got " + shape_str(features.shape()));
  return forward_layers(stem_.forward(features), pattern, adapters);
}

Tensor ConformerEncoder::forward_layers(const Tensor& x, const AttentionPattern& pattern,
                                        const std::vector<AdapterWeights>* adapters) const {
  if (adapters && adapters->size() != layers_.size())
    throw std::invalid_argument("encoder: adapter count does not match layer count");
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    h = layers_[i].forward(h, pattern, adapters ? &(*adapters)[i] : nullptr);
  return h;
}

void ConformerEncoder::collect(NamedParams& out, const std::string& prefix) const {
  stem_.collect(out, prefix + ".stem");
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].collect(out, prefix + ".layers." + std::to_string(i));
}

std::size_t conformer_block_param_count(const ConformerConfig& cfg) {
  const std::size_t d = cfg.model_dim, m = cfg.ff_multiplier, k = cfg.conv_kernel_size;
  const std::size_t ln = 2 * d;
  const std::size_t ff = ln + (d * m * d + m * d) + (m * d * d + d);
  std::size_t attn = ln + 4 * (d * d + d);
  if (cfg.relative_attention) attn += cfg.attention_heads * (2 * cfg.rel_pos_cap + 1);
  const std::size_t conv =
      cfg.use_convolution ? ln + (d * 2 * d + 2 * d) + (k * d + d) + ln + (d * d + d) : 0;
  return 2 * ff + attn + conv + ln;
}

std::size_t conformer_param_count(const ConformerConfig& cfg) {
  const std::size_t d = cfg.model_dim;
  const std::size_t stem = cfg.input_dim * cfg.subsampling_factor * d + d + 2 * d;
  return stem + cfg.num_layers * conformer_block_param_count(cfg);
}

ReceptiveFieldReport receptive_field(const ConformerConfig& cfg, const AttentionPattern& pattern,
                                     std::size_t frame_duration_ms, std::size_t sequence_length) {
  ReceptiveFieldReport r;
  r.pattern = pattern.to_string();
  r.num_layers = cfg.num_layers;
  r.conv_kernel_size = cfg.conv_kernel_size;
  r.frame_duration_ms = frame_duration_ms;
  const std::size_t L = cfg.num_layers;
  const std::size_t half_kernel = cfg.use_convolution ? (cfg.conv_kernel_size - 1) / 2 : 0;
  r.conv_rf_frames = L * 2 * half_kernel;

  switch (pattern.kind) {
    case AttentionKind::Global: {
      r.attention_unbounded = true;
      const std::size_t reach = sequence_length > 0 ? sequence_length - 1 : 0;
      r.attention_left = r.attention_right = reach;
      r.total_left = r.total_right = reach;
      break;
    }
    case AttentionKind::Local:
      r.attention_left = L * pattern.left;
      r.attention_right = L * pattern.right;
      r.total_left = L * (pattern.left + half_kernel);
      r.total_right = L * (pattern.right + half_kernel);
      break;
    case AttentionKind::Chunk: {
      // Within-chunk attention never leaks: one-sided reach is at most s-1
      // regardless of depth.
      const std::size_t s = pattern.chunk;
      r.attention_left = r.attention_right = s - 1;
      // Convolutions do leak; propagate the influencing interval backwards
      // through each layer (conv widens by half_kernel, attention snaps to
      // chunk boundaries) for every phase within a chunk.
      const long ls = static_cast<long>(s);
      auto floor_div = [](long a, long b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
      for (long t = 0; t < ls; ++t) {
        long a = t, b = t;
        for (std::size_t layer = 0; layer < L; ++layer) {
          a -= static_cast<long>(half_kernel);
          b += static_cast<long>(half_kernel);
          a = floor_div(a, ls) * ls;
          b = floor_div(b, ls) * ls + ls - 1;
        }
        r.total_left = std::max(r.total_left, static_cast<std::size_t>(t - a));
        r.total_right = std::max(r.total_right, static_cast<std::size_t>(b - t));
      }
      break;
    }
  }
  r.attention_rf_frames = r.attention_left + r.attention_right;
  r.attention_rf_width = r.attention_rf_frames + 1;
  r.total_rf_frames = r.total_left + r.total_right;
  r.total_rf_width = r.total_rf_frames + 1;
  return r;
}

std::string format_ms_as_seconds(std::size_t ms) {
  std::string s = std::to_string(ms / 1000);
  std::size_t frac = ms % 1000;
  if (frac != 0) {
    std::string digits = std::to_string(frac);
    digits.insert(0, 3 - digits.size(), '0');
    while (!digits.empty() && digits.back() == '0') digits.pop_back();
    s += "." + digits;
  }
  return s;
}

std::string format_receptive_field(const ReceptiveFieldReport& r) {
  std::ostringstream os;
  auto row = [&](const std::string& label, const std::string& value) {
    os << std::left << std::setw(28) << label << value << "\n";
  };
  row("pattern", r.pattern);
  row("layers", std::to_string(r.num_layers));
  row("conv kernel", std::to_string(r.conv_kernel_size));
  row("encoder frame", std::to_string(r.frame_duration_ms) + " ms");
  const std::string unb = r.attention_unbounded ? " (unbounded: whole sequence)" : "";
  row("attention reach L/R", std::to_string(r.attention_left) + " / " +
                                 std::to_string(r.attention_right) + " frames" + unb);
  row("attention RF", std::to_string(r.attention_rf_frames) + " frames = " +
                          format_ms_as_seconds(r.attention_rf_ms()) + " s (width " +
                          std::to_string(r.attention_rf_width) + ")");
  row("conv RF", std::to_string(r.conv_rf_frames) + " frames");
  row("total RF", std::to_string(r.total_rf_frames) + " frames = " +
                      format_ms_as_seconds(r.total_rf_ms()) + " s (width " +
                      std::to_string(r.total_rf_width) + ")");
  os << "rf pattern=" << r.pattern << " layers=" << r.num_layers
     << " frames=" << (r.attention_unbounded && r.attention_rf_frames == 0 ? std::string("unbounded")
                                                                             : std::to_string(r.attention_rf_frames))
     << " seconds=" << format_ms_as_seconds(r.attention_rf_ms())
     << " width=" << r.attention_rf_width << " total_frames=" << r.total_rf_frames
     << " total_seconds=" << format_ms_as_seconds(r.total_rf_ms()) << "\n";
  return os.str();
}

}  // namespace usm
