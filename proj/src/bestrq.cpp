#include "usm/bestrq.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <cmath>
#include <stdexcept>

#include "usm/ops.hpp"
#include "usm/random.hpp"

namespace usm {

namespace {
std::atomic<std::size_t> g_empty_masks{0};
}  // namespace

RandomQuantizer::RandomQuantizer(std::size_t input_dim, std::size_t embedding_dim,
                                 std::size_t num_codebooks, std::size_t codebook_size,
                                 std::uint64_t seed)
    : projection_(input_dim, embedding_dim),
      codebooks_(num_codebooks * codebook_size, embedding_dim),
      num_codebooks_(num_codebooks) {
  if (input_dim == 0 || embedding_dim == 0 || num_codebooks == 0 || codebook_size == 0)
    throw std::invalid_argument("quantizer dimensions must be positive");
  Rng rng(derive_seed(seed, {0x5151}));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(input_dim));
  for (auto& v : projection_.data) v = rng.normal(0.0, stddev);
  for (auto& v : codebooks_.data) v = rng.normal();
  *this = RandomQuantizer(std::move(projection_), std::move(codebooks_), num_codebooks);
}

RandomQuantizer::RandomQuantizer(Matrix projection, Matrix codebooks, std::size_t num_codebooks)
    : projection_(std::move(projection)),
      codebooks_(std::move(codebooks)),
      num_codebooks_(num_codebooks) {
  if (num_codebooks_ == 0 || codebooks_.rows % num_codebooks_ != 0 ||
      codebooks_.cols != projection_.cols)
    throw std::invalid_argument("quantizer: codebooks do not match projection/codebook count");
  for (std::size_t r = 0; r < codebooks_.rows; ++r) {
    double norm = 0.0;
    for (double v : codebooks_.row(r)) norm += v * v;
    if (norm == 0.0) throw std::invalid_argument("quantizer: zero-norm codebook vector");
  }
  checksum_ = checksum();
}

std::uint64_t RandomQuantizer::checksum() const {
  return usm::checksum(projection_.data) ^ (usm::checksum(codebooks_.data) * 31);
}

void RandomQuantizer::verify() const {
  if (checksum() != checksum_) throw std::logic_error("frozen quantizer state was modified");
}

Matrix stack_frames(const Matrix& frames, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("stack_frames: zero factor");
  const std::size_t groups = frames.rows / factor;
  Matrix out(groups, frames.cols * factor);
  std::copy_n(frames.data.begin(), groups * factor * frames.cols, out.data.begin());
  return out;
}

QuantizedTargets quantize(const Matrix& frames, const RandomQuantizer& q) {
  if (frames.cols != q.input_dim())
    throw ShapeError("quantize: frame dim " + std::to_string(frames.cols) +
                     " != quantizer input dim " + std::to_string(q.input_dim()));
  const std::size_t T = frames.rows, E = q.embedding_dim(), N = q.num_codebooks(),
                    C = q.codebook_size();
  // Codebook vectors are compared through cosine; normalize once.
  std::vector<double> unit(q.codebooks().data);
  for (std::size_t r = 0; r < N * C; ++r) {
    double norm = 0.0;
    for (std::size_t e = 0; e < E; ++e) norm += unit[r * E + e] * unit[r * E + e];
    norm = std::sqrt(norm);
    for (std::size_t e = 0; e < E; ++e) unit[r * E + e] /= norm;
  }
  QuantizedTargets out;
  out.labels.assign(N, std::vector<std::size_t>(T, 0));
  std::vector<double> proj(E);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(proj.begin(), proj.end(), 0.0);
    auto x = frames.row(t);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] == 0.0) continue;
      auto p = q.projection().row(i);
      for (std::size_t e = 0; e < E; ++e) proj[e] += x[i] * p[e];
    }
    double pnorm = 0.0;
    for (double v : proj) pnorm += v * v;
    if (pnorm == 0.0) {
      ++out.degenerate_frames;
      continue;
    }
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t best = 0;
      double best_score = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) {
        const double* u = &unit[(n * C + c) * E];
        double s = 0.0;
        for (std::size_t e = 0; e < E; ++e) s += proj[e] * u[e];
        if (s > best_score) {
          best_score = s;
          best = c;
        }
      }
      out.labels[n][t] = best;
    }
  }
  return out;
}

std::size_t MaskSpec::span_frames(double frame_seconds) const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(span_seconds / frame_seconds)));
}

void MaskSpec::validate() const {
  if (!(start_probability >= 0.0 && start_probability <= 1.0))
    throw std::invalid_argument("mask start probability must be in [0,1]");
  if (!(span_seconds > 0.0)) throw std::invalid_argument("mask span must be positive");
  if (noise_std < 0.0) throw std::invalid_argument("mask noise std must be non-negative");
}

std::vector<unsigned char> sample_mask(std::size_t num_frames, std::size_t span_frames,
                                       double start_probability, std::uint64_t seed) {
  std::vector<unsigned char> mask(num_frames, 0);
  Rng rng(derive_seed(seed, {0x4d41534b}));
  for (std::size_t t = 0; t < num_frames; ++t) {
    if (rng.uniform() < start_probability)
      for (std::size_t k = t; k < std::min(num_frames, t + span_frames); ++k) mask[k] = 1;
  }
  return mask;
}

double expected_mask_fraction(double start_probability, std::size_t span_frames) {
  return 1.0 - std::pow(1.0 - start_probability, static_cast<double>(span_frames));
}

MaskResult apply_mask(const Matrix& frames, double frame_seconds, const MaskSpec& spec) {
  spec.validate();
  MaskResult out;
  out.masked = frames;
  out.frame_mask = sample_mask(frames.rows, spec.span_frames(frame_seconds),
                               spec.start_probability, spec.seed);
  Rng noise(derive_seed(spec.seed, {0x4e4f4953}));
  for (std::size_t t = 0; t < frames.rows; ++t) {
    if (!out.frame_mask[t]) continue;
    out.mask_indices.push_back(t);
    for (auto& v : out.masked.row(t)) v = noise.normal(spec.noise_mean, spec.noise_std);
  }
  return out;
}

std::vector<std::size_t> subsample_mask(const std::vector<unsigned char>& frame_mask,
                                        std::size_t factor, std::size_t encoder_frames) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < encoder_frames; ++t) {
    bool any = false;
    for (std::size_t k = t * factor; k < std::min(frame_mask.size(), (t + 1) * factor); ++k)
      any = any || frame_mask[k];
    if (any) out.push_back(t);
  }
  return out;
}

MultiSoftmaxHeads::MultiSoftmaxHeads(std::size_t model_dim, std::size_t num_codebooks,
                                     std::size_t codebook_size, Rng& rng) {
  heads.reserve(num_codebooks);
  for (std::size_t n = 0; n < num_codebooks; ++n) heads.emplace_back(model_dim, codebook_size, rng);
}

void MultiSoftmaxHeads::collect(NamedParams& out, const std::string& prefix) const {
  for (std::size_t n = 0; n < heads.size(); ++n) heads[n].collect(out, prefix + "." + std::to_string(n));
}

BestRqLoss bestrq_loss(const Tensor& encoded, const MultiSoftmaxHeads& heads,
                       const QuantizedTargets& targets) {
  if (heads.heads.size() != targets.labels.size())
    throw std::invalid_argument("bestrq_loss: " + std::to_string(heads.heads.size()) +
                                " heads for " + std::to_string(targets.labels.size()) + " codebooks");
  if (encoded.dim(0) != targets.num_frames())
    throw ShapeError("bestrq_loss: encoder output " + shape_str(encoded.shape()) + " vs " +
                     std::to_string(targets.num_frames()) + " target frames");
  BestRqLoss out;
  if (targets.mask_indices.empty()) {
    ++g_empty_masks;
    out.empty_mask = true;
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  const auto& rows = targets.mask_indices;
  out.masked_frames = rows.size();
  Tensor selected = ops::gather_rows(encoded, rows);
  std::vector<Tensor> per_head;
  for (std::size_t n = 0; n < heads.heads.size(); ++n) {
    std::vector<std::size_t> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = targets.labels[n][rows[i]];
    Tensor logp = ops::log_softmax_rows(heads.heads[n].forward(selected));
    const std::size_t C = logp.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto row = logp.values().subspan(i * C, C);
      if (static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[i])
        ++out.correct;
    }
    per_head.push_back(ops::scale(ops::sum(ops::pick(logp, labels)),
                                  -1.0 / static_cast<double>(rows.size())));
  }
  Tensor total = per_head[0];
  for (std::size_t n = 1; n < per_head.size(); ++n) total = ops::add(total, per_head[n]);
  out.loss = ops::scale(total, 1.0 / static_cast<double>(per_head.size()));
  return out;
}

std::size_t bestrq_empty_mask_count() { return g_empty_masks.load(); }

}  // namespace usm
