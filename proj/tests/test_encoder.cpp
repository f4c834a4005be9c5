#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "usm/encoder.hpp"
#include "usm/gradcheck.hpp"
#include "usm/model.hpp"
#include "usm/ops.hpp"

using namespace usm;

namespace {

ConformerConfig small_config(std::size_t layers = 2) {
  ConformerConfig c;
  c.num_layers = layers;
  c.model_dim = 8;
  c.attention_heads = 2;
  c.conv_kernel_size = 3;
  c.input_dim = 6;
  c.ff_multiplier = 2;
  c.rel_pos_cap = 4;
  return c;
}

Tensor random_features(std::size_t T, std::size_t D, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<double> v(T * D);
  for (auto& x : v) x = rng.normal();
  return Tensor::from({T, D}, std::move(v), grad);
}

}  // namespace

TEST(AttentionMask, GlobalAndSingleChunkAgree) {
  EXPECT_EQ(build_attention_mask(AttentionPattern::chunked(8), 8),
            build_attention_mask(AttentionPattern::global(), 8));
}

TEST(AttentionMask, LocalOneOneIsTridiagonal) {
  auto m = build_attention_mask(AttentionPattern::local(1, 1), 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m[i * 4 + j] != 0, (i > j ? i - j : j - i) <= 1);
}

TEST(AttentionMask, ChunkBlocksWithPartialTail) {
  auto m = build_attention_mask(AttentionPattern::chunked(3), 7);
  const int block[7] = {0, 0, 0, 1, 1, 1, 2};
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(m[i * 7 + j] != 0, block[i] == block[j]);
}

TEST(AttentionMask, AsymmetricLocal) {
  auto m = build_attention_mask(AttentionPattern::local(2, 0), 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m[i * 5 + j] != 0, j <= i && i - j <= 2);
}

TEST(AttentionPattern, ParseRoundTrip) {
  for (std::string s : {"global", "local:3:5", "chunk:25"})
    EXPECT_EQ(AttentionPattern::parse(s).to_string(), s);
  EXPECT_THROW(AttentionPattern::parse("chunk:0"), std::invalid_argument);
  EXPECT_THROW(AttentionPattern::parse("banana"), std::invalid_argument);
}

TEST(ReceptiveField, LocalGrowsLinearlyWithDepth) {
  ConformerConfig c;
  c.num_layers = 32;
  auto r = receptive_field(c, AttentionPattern::local(128, 128), 40);
  EXPECT_EQ(r.attention_rf_frames, 8192u);
  EXPECT_EQ(r.attention_rf_ms(), 327680u);
  EXPECT_EQ(format_ms_as_seconds(r.attention_rf_ms()), "327.68");
  EXPECT_GT(r.attention_rf_ms(), 327000u);
}

TEST(ReceptiveField, FourLayersOfLocalOneOne) {
  ConformerConfig c;
  c.num_layers = 4;
  EXPECT_EQ(receptive_field(c, AttentionPattern::local(1, 1)).attention_rf_width, 9u);
}

TEST(ReceptiveField, ChunkIsDepthIndependent) {
  for (std::size_t s : {1u, 2u, 8u, 25u}) {
    for (std::size_t L = 1; L <= 64; ++L) {
      ConformerConfig c;
      c.num_layers = L;
      auto r = receptive_field(c, AttentionPattern::chunked(s));
      EXPECT_LE(r.attention_rf_width, 2 * s - 1);
      EXPECT_EQ(r.attention_rf_frames, 2 * (s - 1));  // worst case over positions
    }
  }
}

TEST(ReceptiveField, ReportHasMachineLine) {
  ConformerConfig c;
  c.num_layers = 32;
  const std::string text = format_receptive_field(receptive_field(c, AttentionPattern::local(128, 128)));
  EXPECT_NE(text.find("rf pattern=local:128:128 layers=32 frames=8192 seconds=327.68"), std::string::npos);
}

TEST(ParamCount, MatchesClosedForm) {
  for (bool conv : {true, false}) {
    ConformerConfig c = small_config(3);
    c.use_convolution = conv;
    Rng rng(1);
    ConformerEncoder enc(c, rng);
    NamedParams p;
    enc.collect(p, "enc");
    EXPECT_EQ(count_params(p), conformer_param_count(c));
  }
}

TEST(ParamCount, LargeConfigsKeepTheirSizeRatio) {
  ConformerConfig small, large;
  small.num_layers = 24, small.model_dim = 1024, small.attention_heads = 8, small.conv_kernel_size = 5;
  large.num_layers = 32, large.model_dim = 1536, large.attention_heads = 16, large.conv_kernel_size = 5;
  const double ratio = static_cast<double>(conformer_param_count(large)) / conformer_param_count(small);
  EXPECT_NEAR(ratio, 2.0 / 0.6, 0.15 * 2.0 / 0.6);
}

TEST(Encoder, OutputShape) {
  ConformerConfig c = small_config();
  Rng rng(2);
  ConformerEncoder enc(c, rng);
  Tensor y = enc.forward(random_features(23, 6, 3), AttentionPattern::global());
  EXPECT_EQ(y.shape(), (Shape{5, 8}));
  EXPECT_THROW(enc.forward(random_features(3, 6, 3), AttentionPattern::global()), std::invalid_argument);
}

TEST(Encoder, ShortInputChunkEqualsGlobal) {
  ConformerConfig c = small_config();
  c.rel_pos_cap = 8;
  Rng rng(4);
  ConformerEncoder enc(c, rng);
  Tensor x = random_features(24, 6, 5);
  const Tensor a = enc.forward(x, AttentionPattern::global());
  const Tensor b = enc.forward(x, AttentionPattern::chunked(8));
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST(Encoder, DiagonalAttentionIsPositionwise) {
  ConformerConfig c = small_config(1);
  c.use_convolution = false;
  Rng rng(6);
  ConformerBlock block(c, rng);
  Tensor x = random_features(6, 8, 7);
  Tensor y = block.forward(x, AttentionPattern::local(0, 0));
  std::vector<double> changed(x.values().begin(), x.values().end());
  for (std::size_t j = 0; j < 8; ++j) changed[4 * 8 + j] += 1.0;
  Tensor y2 = block.forward(Tensor::from({6, 8}, changed), AttentionPattern::local(0, 0));
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 8; ++j) {
      const double a = y.values()[t * 8 + j], b = y2.values()[t * 8 + j];
      if (t == 4) continue;
      EXPECT_EQ(a, b) << "frame " << t;
    }
}

TEST(Encoder, LocalContextLimitsInfluence) {
  // One layer of local(1,1) with convolution off: output t depends on
  // inputs t-1..t+1 only.
  ConformerConfig c = small_config(1);
  c.use_convolution = false;
  c.subsampling_factor = 1;
  c.input_dim = 8;
  Rng rng(8);
  ConformerEncoder enc(c, rng);
  Tensor x = random_features(10, 8, 9);
  Tensor y = enc.forward(x, AttentionPattern::local(1, 1));
  std::vector<double> changed(x.values().begin(), x.values().end());
  changed[5 * 8] += 1.0;
  Tensor y2 = enc.forward(Tensor::from({10, 8}, changed), AttentionPattern::local(1, 1));
  for (std::size_t t = 0; t < 10; ++t) {
    bool same = true;
    for (std::size_t j = 0; j < 8; ++j) same = same && y.values()[t * 8 + j] == y2.values()[t * 8 + j];
    EXPECT_EQ(same, t < 4 || t > 6) << "frame " << t;
  }
}

class BlockGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(BlockGradient, MatchesFiniteDifferences) {
  ConformerConfig c = small_config(1);
  Rng rng(10);
  ConformerBlock block(c, rng);
  Tensor x = random_features(7, 8, 11, true);
  const auto pattern = AttentionPattern::parse(GetParam());
  NamedParams all{{"x", x}}, params;
  block.collect(all, "block");
  // Adding one vector to every key shifts each score row by a constant, so
  // the key bias has an exactly zero gradient; a relative FD error on it is
  // pure noise. Check it directly instead.
  for (auto& p : all)
    if (p.first != "block.attention.key.bias") params.push_back(p);
  Tensor w = random_features(7, 8, 12);
  auto f = [&] { return ops::sum(ops::mul(block.forward(x, pattern), w)); };
  EXPECT_LT(grad_check(f, params).max_relative_error, 1e-5);
  f().backward();
  for (double g : block.attention.key.bias.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Patterns, BlockGradient, ::testing::Values("global", "local:2:1", "chunk:3"),
                         [](const auto& info) {
                           std::string s = info.param;
                           std::replace(s.begin(), s.end(), ':', '_');
                           return s;
                         });

TEST(Model, ParameterGroupsPartitionEverything) {
  ModelConfig cfg;
  cfg.encoder = small_config();
  cfg.encoder.input_dim = 128;
  cfg.speech_layer = true;
  cfg.text_encoder = true;
  AsrModel m(cfg, 1);
  std::set<const void*> enc, dec, all;
  for (auto& [n, t] : m.encoder_parameters()) enc.insert(t.impl());
  for (auto& [n, t] : m.decoder_parameters()) dec.insert(t.impl());
  for (auto& [n, t] : m.parameters()) all.insert(t.impl());
  for (auto* p : enc) EXPECT_EQ(dec.count(p), 0u);
  EXPECT_EQ(enc.size() + dec.size(), all.size());
  for (auto* p : all) EXPECT_TRUE(enc.count(p) || dec.count(p));
}

TEST(Model, SameSeedSameWeights) {
  ModelConfig cfg;
  cfg.encoder = small_config();
  cfg.encoder.input_dim = 128;
  EXPECT_EQ(params_checksum(AsrModel(cfg, 3).parameters()), params_checksum(AsrModel(cfg, 3).parameters()));
  EXPECT_NE(params_checksum(AsrModel(cfg, 3).parameters()), params_checksum(AsrModel(cfg, 4).parameters()));
}
