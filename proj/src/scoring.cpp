#include "usm/scoring.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace usm {

double EditStats::rate() const {
  if (reference_length == 0) throw std::domain_error("error rate undefined for an empty reference");
  return static_cast<double>(errors()) / static_cast<double>(reference_length);
}

double EditStats::deletion_rate() const {
  if (reference_length == 0) throw std::domain_error("error rate undefined for an empty reference");
  return static_cast<double>(deletions) / static_cast<double>(reference_length);
}

EditStats& EditStats::operator+=(const EditStats& o) {
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  reference_length += o.reference_length;
  return *this;
}

EditStats align(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> cost((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return cost[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1,
                           at(i, j - 1) + 1});

  EditStats s;
  s.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++s.substitutions;
      --i, --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++s.deletions;
      --i;
    } else {
      ++s.insertions;
      --j;
    }
  }
  return s;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

std::vector<std::string> split_chars(const std::string& text) {
  std::vector<std::string> out;
  for (char c : text) out.emplace_back(1, c);
  return out;
}

EditStats word_errors(const std::string& reference, const std::string& hypothesis) {
  return align(split_words(reference), split_words(hypothesis));
}

EditStats char_errors(const std::string& reference, const std::string& hypothesis) {
  return align(split_chars(reference), split_chars(hypothesis));
}

double wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
  if (reference.empty()) throw std::domain_error("wer: empty reference");
  return align(reference, hypothesis).rate();
}

double cer(const std::string& reference, const std::string& hypothesis) {
  if (reference.empty()) throw std::domain_error("cer: empty reference");
  return char_errors(reference, hypothesis).rate();
}

}  // namespace usm
