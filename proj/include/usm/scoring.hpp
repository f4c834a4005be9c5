// Edit-distance scoring for word and character error rates.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace usm {

struct EditStats {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_length = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
  // Throws std::domain_error when the reference is empty.
  double rate() const;
  double deletion_rate() const;
  EditStats& operator+=(const EditStats& o);
};

// Unit-cost Levenshtein alignment. Among minimum-cost alignments the
// backtrace prefers match/substitution, then deletion, then insertion.
EditStats align(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);

std::vector<std::string> split_words(const std::string& text);
std::vector<std::string> split_chars(const std::string& text);

EditStats word_errors(const std::string& reference, const std::string& hypothesis);
EditStats char_errors(const std::string& reference, const std::string& hypothesis);

// Reference must be non-empty.
double wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);
double cer(const std::string& reference, const std::string& hypothesis);

}  // namespace usm
