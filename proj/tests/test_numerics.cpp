#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "usm/gradcheck.hpp"
#include "usm/layers.hpp"
#include "usm/ops.hpp"
#include "usm/random.hpp"

using namespace usm;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double magnitude = 10.0, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-magnitude, magnitude);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Reduces any tensor to a scalar through fixed random weights so that every
// output element contributes a distinct gradient.
Tensor weighted_sum(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = random_tensor(t.shape(), rng, 1.0, false);
  return ops::sum(ops::mul(t, w));
}

double check(const std::function<Tensor()>& f, const NamedParams& params) {
  GradReport r = grad_check(f, params, 1e-5);
  EXPECT_EQ(r.non_finite_probes, 0u);
  return r.max_relative_error;
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  Tensor t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Backward, SumOfSquares) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tensor loss = ops::sum(ops::mul(x, x));
  EXPECT_DOUBLE_EQ(loss.item(), 14.0);
  loss.backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
}

TEST(Backward, LogSumExpOfConstantVectorIsUniform) {
  Tensor x = Tensor::from({2}, {3.7, 3.7}, true);
  ops::logsumexp(x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.5);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.5);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(ops::square(x).backward(), ShapeError);
}

TEST(Backward, ShapeErrorsNameTheShapes) {
  Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 5});
  try {
    ops::matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,5]"), std::string::npos);
  }
}

TEST(Backward, RepeatedCallsAreBitIdentical) {
  Rng rng(5);
  Tensor w = random_tensor({4, 3}, rng, 1.0);
  Tensor x = random_tensor({5, 4}, rng, 1.0, false);
  Tensor loss = ops::sum(ops::log_softmax_rows(ops::matmul(x, w)));
  loss.backward();
  std::vector<double> g1(w.grad().begin(), w.grad().end());
  loss.backward();
  std::vector<double> g2(w.grad().begin(), w.grad().end());
  EXPECT_EQ(g1, g2);
  Tensor loss2 = ops::sum(ops::log_softmax_rows(ops::matmul(x, w)));
  EXPECT_EQ(loss.item(), loss2.item());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = ops::square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, QuadraticOneParameter) {
  Tensor x = Tensor::from({1}, {1.3}, true);
  GradReport r = grad_check([&] { return ops::sum(ops::square(x)); }, {{"x", x}}, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-8);
  ASSERT_EQ(r.per_parameter_errors.size(), 1u);
  EXPECT_EQ(r.max_relative_error, r.per_parameter_errors[0].second);
}

TEST(GradCheck, ThreeLayerMlp) {
  Rng rng(11);
  Tensor x = random_tensor({6, 5}, rng, 1.0, false);
  Tensor w1 = random_tensor({5, 8}, rng, 0.5), b1 = random_tensor({8}, rng, 0.5);
  Tensor w2 = random_tensor({8, 8}, rng, 0.5), b2 = random_tensor({8}, rng, 0.5);
  Tensor w3 = random_tensor({8, 1}, rng, 0.5);
  auto loss = [&] {
    Tensor h = ops::tanh(ops::add_rowwise(ops::matmul(x, w1), b1));
    h = ops::swish(ops::add_rowwise(ops::matmul(h, w2), b2));
    return ops::mean(ops::square(ops::matmul(h, w3)));
  };
  EXPECT_LT(check(loss, {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"w3", w3}}), 1e-6);
}

TEST(GradCheck, SoftmaxCrossEntropyLayer) {
  Rng rng(12);
  Tensor x = random_tensor({7, 4}, rng, 1.0, false);
  Tensor w = random_tensor({4, 6}, rng, 1.0), b = random_tensor({6}, rng, 1.0);
  std::vector<std::size_t> labels{0, 5, 2, 3, 3, 1, 4};
  auto loss = [&] {
    Tensor logp = ops::log_softmax_rows(ops::add_rowwise(ops::matmul(x, w), b));
    return ops::scale(ops::sum(ops::pick(logp, labels)), -1.0 / 7.0);
  };
  EXPECT_LT(check(loss, {{"w", w}, {"b", b}}), 1e-6);
}

TEST(GradCheck, NonFiniteProbeIsReported) {
  Tensor x = Tensor::from({1}, {1e-6}, true);
  GradReport r = grad_check([&] { return ops::sum(ops::log(x)); }, {{"x", x}}, 1e-5);
  EXPECT_GT(r.non_finite_probes, 0u);
  EXPECT_TRUE(std::isinf(r.max_relative_error));
}

// Every primitive against central differences on random inputs of
// magnitude <= 10.
class PrimitiveGrad : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGrad, MatchesCentralDifferences) {
  Rng rng(1000 + GetParam());
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Tensor m = random_tensor({4, 2}, rng);
  Tensor row = random_tensor({4}, rng);
  Tensor pos = Tensor::from({3, 4}, std::vector<double>(12), true);
  for (auto& v : pos.mutable_values()) v = rng.uniform(0.5, 10.0);
  const double tol = 1e-6;

  EXPECT_LT(check([&] { return weighted_sum(ops::matmul(a, m)); }, {{"a", a}, {"m", m}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::matmul_nt(a, b)); }, {{"a", a}, {"b", b}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::add(a, b)); }, {{"a", a}, {"b", b}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::sub(a, b)); }, {{"a", a}, {"b", b}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::mul(a, b)); }, {{"a", a}, {"b", b}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::add_rowwise(a, row)); }, {{"a", a}, {"r", row}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::mul_rowwise(a, row)); }, {{"a", a}, {"r", row}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::scale(a, -2.5)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::add_scalar(a, 3.0)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return ops::mean(a); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::exp(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::log(pos)); }, {{"p", pos}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::square(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::sigmoid(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::swish(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::tanh(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::softmax_rows(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::log_softmax_rows(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return ops::logsumexp(a); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return ops::mse(a, b); }, {{"a", a}, {"b", b}}), tol);
  std::vector<unsigned char> mask{1, 0, 0, 1, 1, 1, 0, 1, 0, 0, 1, 0};
  EXPECT_LT(check([&] { return ops::masked_sum(a, mask); }, {{"a", a}}), tol);

  Tensor gamma = random_tensor({4}, rng), beta = random_tensor({4}, rng);
  EXPECT_LT(check([&] { return weighted_sum(ops::layer_norm(a, gamma, beta)); },
                  {{"x", a}, {"gamma", gamma}, {"beta", beta}}),
            tol);

  Tensor seq = random_tensor({6, 4}, rng);
  Tensor kernel = random_tensor({3, 4}, rng), kbias = random_tensor({4}, rng);
  EXPECT_LT(check([&] { return weighted_sum(ops::depthwise_conv1d(seq, kernel, kbias)); },
                  {{"x", seq}, {"w", kernel}, {"b", kbias}}),
            tol);

  EXPECT_LT(check([&] { return weighted_sum(ops::pick(a, {3, 0, 2})); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::gather_rows(a, {2, 0, 2, 1})); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::slice_rows(a, 1, 2)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::slice_cols(a, 1, 2)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::concat_rows({a, b})); }, {{"a", a}, {"b", b}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::concat_cols({a, b})); }, {{"a", a}, {"b", b}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::reshape(a, {6, 2})); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::transpose(a)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::repeat_rows(a, 3)); }, {{"a", a}}), tol);
  EXPECT_LT(check([&] { return weighted_sum(ops::interpolate_rows(a, 7)); }, {{"a", a}}), tol);
  Tensor noise = random_tensor({3, 4}, rng, 1.0, false);
  EXPECT_LT(check([&] { return weighted_sum(ops::replace_rows(a, {0, 1, 0}, noise)); }, {{"a", a}}), tol);
}

INSTANTIATE_TEST_SUITE_P(RandomSeeds, PrimitiveGrad, ::testing::Range(0, 3));

TEST(Attention, BandedMatchesDenseReferenceAndGradients) {
  Rng rng(77);
  const std::size_t T = 7, d = 6, heads = 2, cap = 3;
  Tensor q = random_tensor({T, d}, rng, 1.0), k = random_tensor({T, d}, rng, 1.0),
         v = random_tensor({T, d}, rng, 1.0), bias = random_tensor({heads, 2 * cap + 1}, rng, 1.0);
  struct Case {
    std::vector<std::size_t> lo, hi;
  };
  std::vector<Case> cases;
  // Global, local(1,2) and chunk(3) key ranges.
  Case global, local, chunk;
  for (std::size_t i = 0; i < T; ++i) {
    global.lo.push_back(0);
    global.hi.push_back(T - 1);
    local.lo.push_back(i >= 1 ? i - 1 : 0);
    local.hi.push_back(std::min(T - 1, i + 2));
    chunk.lo.push_back(i / 3 * 3);
    chunk.hi.push_back(std::min(T - 1, i / 3 * 3 + 2));
  }
  for (const Case& c : {global, local, chunk}) {
    std::vector<unsigned char> mask(T * T, 0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = c.lo[i]; j <= c.hi[i]; ++j) mask[i * T + j] = 1;
    Tensor fast = ops::banded_attention(q, k, v, bias, heads, cap, c.lo, c.hi);
    Tensor ref = ops::dense_masked_attention(q, k, v, bias, heads, cap, mask);
    for (std::size_t i = 0; i < fast.numel(); ++i) EXPECT_NEAR(fast.at(i), ref.at(i), 1e-12);
    NamedParams params{{"q", q}, {"k", k}, {"v", v}, {"bias", bias}};
    EXPECT_LT(check([&] { return weighted_sum(ops::banded_attention(q, k, v, bias, heads, cap, c.lo, c.hi)); },
                    params),
              1e-6);
    EXPECT_LT(check([&] { return weighted_sum(ops::dense_masked_attention(q, k, v, bias, heads, cap, mask)); },
                    params),
              1e-6);
  }
}

TEST(Softmax, RowsSumToOneAndLogIsFinite) {
  Rng rng(3);
  Tensor a = random_tensor({20, 9}, rng, 800.0, false);
  Tensor s = ops::softmax_rows(a);
  Tensor ls = ops::log_softmax_rows(a);
  for (std::size_t i = 0; i < 20; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      row += s.at(i, j);
      EXPECT_TRUE(std::isfinite(ls.at(i, j)));
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(Ops, RepeatAndInterpolateShapes) {
  Tensor a = Tensor::from({3, 1}, {1, 2, 3});
  Tensor r = ops::repeat_rows(a, 2);
  EXPECT_EQ(r.shape(), (Shape{6, 1}));
  EXPECT_EQ(std::vector<double>(r.values().begin(), r.values().end()),
            (std::vector<double>{1, 1, 2, 2, 3, 3}));
  Tensor i = ops::interpolate_rows(a, 5);
  EXPECT_DOUBLE_EQ(i.at(0), 1.0);
  EXPECT_DOUBLE_EQ(i.at(2), 2.0);
  EXPECT_DOUBLE_EQ(i.at(4), 3.0);
  EXPECT_DOUBLE_EQ(i.at(1), 1.5);
}

TEST(Checksum, DetectsChanges) {
  std::vector<double> v{1.0, 2.0};
  auto h = checksum(v);
  v[1] = std::nextafter(2.0, 3.0);
  EXPECT_NE(h, checksum(v));
}
