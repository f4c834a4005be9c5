// Helpers shared by the test binaries.

#pragma once

#include <string>

#include "usm/layers.hpp"

namespace usm::test_support {

// Attention key biases shift every score in a row by the same amount, so
// their true gradient is exactly zero and a relative finite-difference error
// on them measures only rounding noise. Split them out for a direct check.
inline bool is_key_bias(const std::string& name) {
  const std::string suffix = "attention.key.bias";
  return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline NamedParams without_key_biases(const NamedParams& params) {
  NamedParams out;
  for (const auto& p : params)
    if (!is_key_bias(p.first)) out.push_back(p);
  return out;
}

inline NamedParams key_biases(const NamedParams& params) {
  NamedParams out;
  for (const auto& p : params)
    if (is_key_bias(p.first)) out.push_back(p);
  return out;
}

}  // namespace usm::test_support
