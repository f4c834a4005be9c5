// Random-projection quantization, span masking and the multi-softmax
// masked-prediction loss.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "usm/layers.hpp"
#include "usm/matrix.hpp"
#include "usm/tensor.hpp"

namespace usm {

// Frozen projection and N codebooks of c unit-normalized code vectors.
// Labels are the argmax of cosine similarity between the projected frame
// and each code vector.
class RandomQuantizer {
 public:
  RandomQuantizer() = default;
  RandomQuantizer(std::size_t input_dim, std::size_t embedding_dim, std::size_t num_codebooks,
                  std::size_t codebook_size, std::uint64_t seed);
  // Explicit construction (tests, checkpoint restore). codebooks is
  // num_codebooks*codebook_size rows of embedding_dim values.
  RandomQuantizer(Matrix projection, Matrix codebooks, std::size_t num_codebooks);

  std::size_t input_dim() const { return projection_.rows; }
  std::size_t embedding_dim() const { return projection_.cols; }
  std::size_t num_codebooks() const { return num_codebooks_; }
  std::size_t codebook_size() const { return codebooks_.rows / num_codebooks_; }
  const Matrix& projection() const { return projection_; }
  const Matrix& codebooks() const { return codebooks_; }

  std::uint64_t checksum() const;
  // Throws if the frozen state changed since construction.
  void verify() const;

 private:
  Matrix projection_;
  Matrix codebooks_;
  std::size_t num_codebooks_ = 0;
  std::uint64_t checksum_ = 0;
};

struct QuantizedTargets {
  std::vector<std::vector<std::size_t>> labels;  // [N][T]
  std::vector<std::size_t> mask_indices;          // sorted, in [0, T)
  std::size_t degenerate_frames = 0;              // zero-norm projections (assigned code 0)

  std::size_t num_frames() const { return labels.empty() ? 0 : labels[0].size(); }
};

// Concatenates `factor` consecutive frames; trailing partial groups dropped.
Matrix stack_frames(const Matrix& frames, std::size_t factor);

// frames: [T, input_dim]. mask_indices are left empty.
QuantizedTargets quantize(const Matrix& frames, const RandomQuantizer& q);

struct MaskSpec {
  double start_probability = 0.01;
  double span_seconds = 0.4;
  double noise_mean = 0.0;
  double noise_std = 0.1;
  std::uint64_t seed = 0;

  std::size_t span_frames(double frame_seconds) const;
  void validate() const;
};

struct MaskResult {
  Matrix masked;
  std::vector<std::size_t> mask_indices;
  std::vector<unsigned char> frame_mask;  // per frame, 1 = masked
};

// Each frame independently starts a span with start_probability; masked
// frames are replaced with Normal(noise_mean, noise_std) noise.
MaskResult apply_mask(const Matrix& frames, double frame_seconds, const MaskSpec& spec);
// Just the span decision, shared by speech and text masking.
std::vector<unsigned char> sample_mask(std::size_t num_frames, std::size_t span_frames,
                                       double start_probability, std::uint64_t seed);
// 1 - (1-p)^span: probability an interior frame is covered.
double expected_mask_fraction(double start_probability, std::size_t span_frames);

// Encoder frame t is masked when any of its `factor` input frames is.
std::vector<std::size_t> subsample_mask(const std::vector<unsigned char>& frame_mask,
                                        std::size_t factor, std::size_t encoder_frames);

// N linear softmax heads over the encoder output.
struct MultiSoftmaxHeads {
  std::vector<Linear> heads;

  MultiSoftmaxHeads() = default;
  MultiSoftmaxHeads(std::size_t model_dim, std::size_t num_codebooks, std::size_t codebook_size,
                    Rng& rng);
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct BestRqLoss {
  Tensor loss;
  std::size_t masked_frames = 0;
  std::size_t correct = 0;  // argmax hits over masked frames and heads
  bool empty_mask = false;
};

// (1/N) sum_n mean_{t in mask} CE(head_n(encoded_t), labels[n][t]).
BestRqLoss bestrq_loss(const Tensor& encoded, const MultiSoftmaxHeads& heads,
                       const QuantizedTargets& targets);

// Number of empty-mask loss evaluations seen by this process.
std::size_t bestrq_empty_mask_count();

}  // namespace usm
