#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"
#include "usm/adapters.hpp"
#include "usm/gradcheck.hpp"
#include "usm/most.hpp"
#include "usm/ops.hpp"
#include "usm/optimizer.hpp"

using namespace usm;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.encoder.num_layers = 2;
  cfg.encoder.model_dim = 8;
  cfg.encoder.attention_heads = 2;
  cfg.encoder.conv_kernel_size = 3;
  cfg.encoder.ff_multiplier = 2;
  cfg.encoder.rel_pos_cap = 4;
  cfg.graphemes = "ab";
  cfg.num_codebooks = 1;
  cfg.codebook_size = 4;
  return cfg;
}

Matrix features(std::size_t T, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(T, 128);
  for (auto& v : m.data) v = rng.normal();
  return m;
}

std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

std::shared_ptr<AsrModel> base_model(std::uint64_t seed = 1) {
  return std::make_shared<AsrModel>(tiny_config(), seed);
}

}  // namespace

TEST(Adapters, ParamCountFormula) {
  Rng rng(1);
  Adapter a(8, 3, rng);
  NamedParams p;
  a.collect(p, "a");
  EXPECT_EQ(count_params(p), adapter_param_count(8, 3));
  EXPECT_THROW(Adapter(8, 9, rng), std::invalid_argument);
  EXPECT_THROW(Adapter(8, 0, rng), std::invalid_argument);
}

TEST(Adapters, DefaultConfigAddsAboutTwoPointThreePercent) {
  auto base = std::make_shared<AsrModel>(ModelConfig{}, 1);
  AdaptedModel m(base, AdapterConfig{});
  const auto r = m.report();
  EXPECT_GE(r.ratio(), 0.020);
  EXPECT_LE(r.ratio(), 0.026);
  m.add_language("xx", 1);
  EXPECT_EQ(count_params(m.adapter_parameters("xx")), r.adapter_params);
}

TEST(Adapters, OversizedBottleneckRejected) {
  AdapterConfig cfg;
  cfg.bottleneck_dim = 9;
  EXPECT_THROW(AdaptedModel(base_model(), cfg), std::invalid_argument);
}

TEST(Adapters, ZeroInitIsTheIdentity) {
  auto base = base_model();
  const Tensor x = features(40, 2).to_tensor();
  const auto expected = values(base->ctc_log_probs(base->encode(x, AttentionPattern::global())));
  AdaptedModel m(base, AdapterConfig{2, 0.0});
  m.add_language("aa", 3);
  EXPECT_EQ(values(m.select("aa").log_probs(x, AttentionPattern::global())), expected);
}

TEST(Adapters, UnknownLanguageListsRegisteredTags) {
  AdaptedModel m(base_model(), AdapterConfig{2, 0.0});
  m.add_language("de", 1);
  m.add_language("fr", 2);
  try {
    m.select("xx");
    FAIL();
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("[de, fr]"), std::string::npos);
  }
  EXPECT_THROW(m.add_language("de", 3), std::invalid_argument);
}

TEST(Adapters, TrainingLeavesTheBaseUntouched) {
  auto base = base_model();
  const auto before = params_checksum(base->parameters());
  AdaptedModel m(base, AdapterConfig{2, 0.0});
  m.add_language("aa", 1);
  Optimizer opt;
  AdamSettings s;
  s.learning_rate = 1e-2;
  s.warmup_steps = 0;
  opt.add_group("aa", m.adapter_parameters("aa"), s);
  const std::vector<PairedUtterance> batch = {{features(40, 4), {{1, 2}}}, {features(36, 5), {{2}}}};
  const auto adapters_before = params_checksum(m.adapter_parameters("aa"));
  for (int i = 0; i < 3; ++i) {
    // Inspect gradients after backward but before the update clears them.
    AsrBatchLoss l = asr_batch_loss(*base, batch, AttentionPattern::global(), &m.select("aa").adapters());
    l.loss.backward();
    for (const auto& [n, t] : base->parameters())
      if (t.has_grad())
        for (double g : t.grad()) ASSERT_EQ(g, 0.0) << n;
    opt.step();
  }
  EXPECT_EQ(params_checksum(base->parameters()), before);
  EXPECT_NE(params_checksum(m.adapter_parameters("aa")), adapters_before);
}

TEST(Adapters, SelectionIsStableAndLanguagesDiverge) {
  auto base = base_model();
  AdaptedModel m(base, AdapterConfig{2, 0.0});
  m.add_language("aa", 1);
  m.add_language("bb", 2);
  const Matrix f = features(40, 6);
  const Tensor x = f.to_tensor();
  // Untrained sets reproduce the base model.
  EXPECT_EQ(values(m.select("bb").log_probs(x, AttentionPattern::global())),
            values(base->ctc_log_probs(base->encode(x, AttentionPattern::global()))));

  AdamSettings s;
  s.learning_rate = 1e-2;
  s.warmup_steps = 0;
  Optimizer oa, ob;
  oa.add_group("aa", m.adapter_parameters("aa"), s);
  ob.add_group("bb", m.adapter_parameters("bb"), s);
  for (int i = 0; i < 5; ++i) {
    adapter_train_step(m, {{f, {{1}}}}, "aa", oa, AttentionPattern::global());
    adapter_train_step(m, {{f, {{2}}}}, "bb", ob, AttentionPattern::global());
  }
  const auto a1 = values(m.select("aa").log_probs(x, AttentionPattern::global()));
  const auto b = values(m.select("bb").log_probs(x, AttentionPattern::global()));
  const auto a2 = values(m.select("aa").log_probs(x, AttentionPattern::global()));
  EXPECT_EQ(a1, a2);
  EXPECT_NE(a1, b);
}

TEST(Adapters, GradientCheck) {
  auto base = base_model();
  AdaptedModel m(base, AdapterConfig{3, 0.0});
  m.add_language("aa", 1);
  // Move the up-projections off zero so every adapter path carries gradient.
  Rng rng(7);
  for (auto& [n, t] : m.adapter_parameters("aa"))
    for (auto& v : t.mutable_values()) v += 0.1 * rng.normal();
  const Tensor x = features(24, 8).to_tensor();
  const LabelSequence target{{1, 2}};
  auto fn = [&] { return ctc_loss(m.select("aa").log_probs(x, AttentionPattern::local(1, 1)), target).loss; };
  EXPECT_LT(grad_check(fn, m.adapter_parameters("aa")).max_relative_error, 1e-5);
}

TEST(Adapters, SaveLoadRoundTrip) {
  auto base = base_model();
  AdaptedModel m(base, AdapterConfig{2, 0.0});
  m.add_language("aa", 1);
  Rng rng(9);
  for (auto& [n, t] : m.adapter_parameters("aa"))
    for (auto& v : t.mutable_values()) v += rng.normal();
  const auto dir = std::filesystem::temp_directory_path() / "usm_test_adapters";
  std::filesystem::remove_all(dir);
  save_adapters(dir, m);

  AdaptedModel loaded(base, AdapterConfig{2, 0.0});
  load_adapters(dir, loaded);
  EXPECT_EQ(loaded.languages(), std::vector<std::string>{"aa"});
  EXPECT_EQ(params_checksum(loaded.adapter_parameters("aa")), params_checksum(m.adapter_parameters("aa")));

  AdaptedModel wrong(base, AdapterConfig{3, 0.0});
  EXPECT_THROW(load_adapters(dir, wrong), std::runtime_error);
  std::filesystem::remove_all(dir);
}
