// CTC loss over grapheme targets, a brute-force oracle, and greedy decoding.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "usm/matrix.hpp"
#include "usm/tensor.hpp"

namespace usm {

// Grapheme inventory. Id 0 is the blank; graphemes occupy 1..size()-1.
class TokenVocab {
 public:
  TokenVocab() = default;
  // Each character of `graphemes` becomes one symbol.
  explicit TokenVocab(const std::string& graphemes);

  std::size_t size() const { return symbols_.size() + 1; }
  static constexpr std::size_t blank_id = 0;
  const std::string& graphemes() const { return symbols_; }
  char symbol(std::size_t id) const;

  std::vector<std::size_t> encode(const std::string& text) const;
  std::string decode(const std::vector<std::size_t>& ids) const;

 private:
  std::string symbols_;
};

// Token ids without blanks.
struct LabelSequence {
  std::vector<std::size_t> ids;
  friend bool operator==(const LabelSequence&, const LabelSequence&) = default;
};

// Minimum frames needed: one per label plus one blank between repeats.
std::size_t ctc_min_frames(const LabelSequence& target);

struct CtcResult {
  Tensor loss;  // scalar negative log-likelihood; +inf when infeasible
  bool infeasible = false;
};

// log_probs: [T, V] row-normalized log-probabilities. Differentiable with
// respect to log_probs. An infeasible target yields +inf and no gradient.
CtcResult ctc_loss(const Tensor& log_probs, const LabelSequence& target);

// Exhaustive enumeration over all V^T paths. T <= 8 and V <= 5.
double ctc_brute_force(const Matrix& log_probs, const LabelSequence& target);

// Blank/repeat collapse of a frame-level path.
LabelSequence ctc_collapse(const std::vector<std::size_t>& path);

LabelSequence ctc_greedy_decode(const Matrix& log_probs);

}  // namespace usm
