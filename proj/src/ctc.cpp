#include "usm/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace usm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double mx = std::max(a, b);
  return mx + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

TokenVocab::TokenVocab(const std::string& graphemes) : symbols_(graphemes) {
  for (std::size_t i = 0; i < symbols_.size(); ++i)
    for (std::size_t j = i + 1; j < symbols_.size(); ++j)
      if (symbols_[i] == symbols_[j])
        throw std::invalid_argument(std::string("duplicate grapheme '") + symbols_[i] + "'");
}

char TokenVocab::symbol(std::size_t id) const {
  if (id == blank_id || id >= size()) throw std::out_of_range("token id " + std::to_string(id));
  return symbols_[id - 1];
}

std::vector<std::size_t> TokenVocab::encode(const std::string& text) const {
  std::vector<std::size_t> ids;
  ids.reserve(text.size());
  for (char c : text) {
    auto pos = symbols_.find(c);
    if (pos == std::string::npos)
      throw std::invalid_argument(std::string("grapheme '") + c + "' not in vocabulary");
    ids.push_back(pos + 1);
  }
  return ids;
}

std::string TokenVocab::decode(const std::vector<std::size_t>& ids) const {
  std::string text;
  text.reserve(ids.size());
  for (auto id : ids) text.push_back(symbol(id));
  return text;
}

std::size_t ctc_min_frames(const LabelSequence& target) {
  std::size_t n = target.ids.size();
  for (std::size_t i = 1; i < target.ids.size(); ++i)
    if (target.ids[i] == target.ids[i - 1]) ++n;
  return n;
}

CtcResult ctc_loss(const Tensor& log_probs, const LabelSequence& target) {
  if (log_probs.rank() != 2) throw ShapeError("ctc_loss: log_probs must be [T,V], got " +
                                              shape_str(log_probs.shape()));
  const std::size_t T = log_probs.dim(0), V = log_probs.dim(1);
  for (auto id : target.ids)
    if (id == TokenVocab::blank_id || id >= V)
      throw std::invalid_argument("ctc_loss: target id " + std::to_string(id) +
                                  " outside [1," + std::to_string(V) + ")");
  CtcResult result;
  if (ctc_min_frames(target) > T) {
    result.infeasible = true;
    result.loss = Tensor::scalar(std::numeric_limits<double>::infinity());
    return result;
  }
  // Blank-interleaved label sequence.
  const std::size_t S = 2 * target.ids.size() + 1;
  std::vector<std::size_t> ext(S, TokenVocab::blank_id);
  for (std::size_t i = 0; i < target.ids.size(); ++i) ext[2 * i + 1] = target.ids[i];
  auto can_skip = [&](std::size_t s) {  // transition s-2 -> s
    return s >= 2 && ext[s] != TokenVocab::blank_id && ext[s] != ext[s - 2];
  };
  const auto& lp = log_probs.impl()->values;
  auto emit = [&](std::size_t t, std::size_t s) { return lp[t * V + ext[s]]; };

  // alpha includes the emission at t; beta covers frames t+1..T-1.
  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  alpha[0] = emit(0, 0);
  if (S > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  beta[(T - 1) * S + S - 1] = 0.0;
  if (S > 1) beta[(T - 1) * S + S - 2] = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta[(t + 1) * S + s] + emit(t + 1, s);
      if (s + 1 < S) b = log_add(b, beta[(t + 1) * S + s + 1] + emit(t + 1, s + 1));
      if (s + 2 < S && can_skip(s + 2)) b = log_add(b, beta[(t + 1) * S + s + 2] + emit(t + 1, s + 2));
      beta[t * S + s] = b;
    }
  }
  double log_likelihood = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_likelihood = log_add(log_likelihood, alpha[(T - 1) * S + S - 2]);

  // d(-log P)/d lp[t,k] = -sum_{s: ext[s]=k} exp(alpha+beta - log P).
  std::vector<double> occupancy(T * V, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      const double v = alpha[t * S + s] + beta[t * S + s];
      if (v != kNegInf) occupancy[t * V + ext[s]] += std::exp(v - log_likelihood);
    }
  result.loss = make_result({1}, {-log_likelihood}, {log_probs},
                            [occupancy = std::move(occupancy)](TensorImpl& self) {
                              TensorImpl* p = self.parents[0].impl();
                              if (!p->requires_grad) return;
                              p->ensure_grad();
                              for (std::size_t i = 0; i < occupancy.size(); ++i)
                                p->grad[i] -= self.grad[0] * occupancy[i];
                            });
  return result;
}

LabelSequence ctc_collapse(const std::vector<std::size_t>& path) {
  LabelSequence out;
  std::size_t prev = TokenVocab::blank_id;
  for (auto id : path) {
    if (id != TokenVocab::blank_id && id != prev) out.ids.push_back(id);
    prev = id;
  }
  return out;
}

double ctc_brute_force(const Matrix& log_probs, const LabelSequence& target) {
  const std::size_t T = log_probs.rows, V = log_probs.cols;
  if (T == 0 || T > 8 || V == 0 || V > 5)
    throw std::invalid_argument("ctc_brute_force: limited to 1<=T<=8 and 1<=V<=5");
  std::vector<std::size_t> path(T, 0);
  double total = kNegInf;
  while (true) {
    if (ctc_collapse(path) == target) {
      double lp = 0.0;
      for (std::size_t t = 0; t < T; ++t) lp += log_probs(t, path[t]);
      total = log_add(total, lp);
    }
    std::size_t t = 0;
    while (t < T && ++path[t] == V) path[t++] = 0;
    if (t == T) break;
  }
  return -total;
}

LabelSequence ctc_greedy_decode(const Matrix& log_probs) {
  std::vector<std::size_t> path(log_probs.rows);
  for (std::size_t t = 0; t < log_probs.rows; ++t) {
    auto row = log_probs.row(t);
    path[t] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return ctc_collapse(path);
}

}  // namespace usm
