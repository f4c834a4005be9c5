// Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. `--only 3,5` restricts the run.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "support.hpp"
#include "usm/adapters.hpp"
#include "usm/checkpoint.hpp"
#include "usm/ctc.hpp"
#include "usm/encoder.hpp"
#include "usm/gradcheck.hpp"
#include "usm/longform.hpp"
#include "usm/most.hpp"
#include "usm/nst.hpp"
#include "usm/ops.hpp"
#include "usm/pipeline.hpp"
#include "usm/synth.hpp"
#include "usm/training.hpp"

using namespace usm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

Matrix gaussian(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (auto& v : m.data) v = rng.normal();
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- 1, 2: receptive field arithmetic ------------------------------------

Outcome receptive_field_local() {
  ConformerConfig c;
  c.num_layers = 32;
  const auto r = receptive_field(c, AttentionPattern::local(128, 128), 40);
  const std::string line = format_receptive_field(r);
  const bool ok = r.attention_rf_frames == 8192 && r.attention_rf_ms() == 327680 &&
                  line.find("frames=8192 seconds=327.68") != std::string::npos && r.attention_rf_ms() > 327000;
  return {ok, "frames=" + std::to_string(r.attention_rf_frames) + " ms=" + std::to_string(r.attention_rf_ms())};
}

Outcome receptive_field_figure() {
  ConformerConfig c;
  c.num_layers = 4;
  const auto local = receptive_field(c, AttentionPattern::local(1, 1));
  bool ok = local.attention_rf_width == 9;
  std::size_t checked = 0;
  for (std::size_t s : {1u, 2u, 3u, 8u, 25u, 64u})
    for (std::size_t L = 1; L <= 64; ++L) {
      c.num_layers = L;
      const auto r = receptive_field(c, AttentionPattern::chunked(s));
      ok = ok && r.attention_rf_width <= 2 * s - 1;
      ++checked;
    }
  return {ok, "local(1,1)x4 width=" + std::to_string(local.attention_rf_width) + ", " + std::to_string(checked) +
                  " chunk configurations within 2s-1"};
}

// ---- 3: CTC against exhaustive enumeration -------------------------------

// Sum over all V^T frame paths whose blank/repeat collapse equals target.
double enumerate_ctc(const Matrix& lp, const std::vector<std::size_t>& target) {
  const std::size_t T = lp.rows, V = lp.cols;
  std::vector<std::size_t> path(T, 0);
  double total = 0.0;
  while (true) {
    std::vector<std::size_t> collapsed;
    std::size_t prev = 0;
    double logp = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      if (path[t] != 0 && path[t] != prev) collapsed.push_back(path[t]);
      prev = path[t];
      logp += lp(t, path[t]);
    }
    if (collapsed == target) total += std::exp(logp);
    std::size_t t = 0;
    while (t < T && ++path[t] == V) path[t++] = 0;
    if (t == T) break;
  }
  return total > 0 ? -std::log(total) : std::numeric_limits<double>::infinity();
}

Outcome ctc_oracle() {
  Rng rng(2024);
  std::size_t feasible = 0, mismatches = 0;
  double worst = 0.0, worst_grad = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t T = rng.integer(1, 6), V = rng.integer(2, 4);
    Matrix lp(T, V);
    for (std::size_t t = 0; t < T; ++t) {
      double z = 0;
      for (std::size_t v = 0; v < V; ++v) z += (lp(t, v) = std::exp(rng.normal()));
      for (std::size_t v = 0; v < V; ++v) lp(t, v) = std::log(lp(t, v) / z);
    }
    std::vector<std::size_t> target(rng.integer(1, std::min<std::int64_t>(T, 4)));
    for (auto& id : target) id = rng.integer(1, V - 1);
    const double expected = enumerate_ctc(lp, target);
    Tensor x = Tensor::from({T, V}, lp.data, true);
    const auto r = ctc_loss(x, {target});
    if (std::isinf(expected) != r.infeasible) {
      ++mismatches;
      continue;
    }
    if (r.infeasible) continue;
    ++feasible;
    worst = std::max(worst, std::abs(r.loss.item() - expected));
    worst_grad = std::max(worst_grad, grad_check([&] { return ctc_loss(x, {target}).loss; }, {{"lp", x}})
                                          .max_relative_error);
  }
  const bool ok = mismatches == 0 && feasible >= 100 && worst <= 1e-10 && worst_grad < 1e-5;
  return {ok, std::to_string(feasible) + " feasible, max |diff|=" + fmt(worst) + ", max grad rel err=" +
                  fmt(worst_grad) + ", feasibility mismatches=" + std::to_string(mismatches)};
}

// ---- 4: finite-difference gradient suite ---------------------------------

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.encoder.num_layers = 1;
  cfg.encoder.model_dim = 8;
  cfg.encoder.attention_heads = 2;
  cfg.encoder.conv_kernel_size = 3;
  cfg.encoder.ff_multiplier = 2;
  cfg.encoder.rel_pos_cap = 4;
  cfg.graphemes = "ab ";
  cfg.num_codebooks = 2;
  cfg.codebook_size = 4;
  cfg.codebook_dim = 4;
  cfg.text_upsample = 4;
  cfg.speech_layer = true;
  cfg.text_encoder = true;
  return cfg;
}

Outcome gradient_suite() {
  std::vector<std::pair<std::string, double>> errors;
  bool key_bias_zero = true;

  for (std::string p : {"global", "local:2:1", "chunk:3"}) {
    ConformerConfig c = tiny_model().encoder;
    Rng rng(10);
    ConformerBlock block(c, rng);
    Tensor x = Tensor::from({7, 8}, gaussian(7, 8, rng).data, true);
    const Tensor w = gaussian(7, 8, rng).to_tensor();
    const auto pattern = AttentionPattern::parse(p);
    NamedParams params{{"x", x}};
    block.collect(params, "block");
    auto f = [&] { return ops::sum(ops::mul(block.forward(x, pattern), w)); };
    errors.emplace_back("conformer " + p, grad_check(f, test_support::without_key_biases(params)).max_relative_error);
    f().backward();
    for (double g : block.attention.key.bias.grad()) key_bias_zero = key_bias_zero && std::abs(g) < 1e-12;
  }
  {
    Rng rng(11);
    MultiSoftmaxHeads heads(3, 2, 4, rng);
    Tensor enc = Tensor::from({5, 3}, gaussian(5, 3, rng).data, true);
    QuantizedTargets t;
    t.labels = {{0, 1, 2, 3, 0}, {3, 3, 1, 0, 2}};
    t.mask_indices = {0, 2, 3};
    NamedParams params{{"enc", enc}};
    heads.collect(params, "heads");
    errors.emplace_back("bestrq heads", grad_check([&] { return bestrq_loss(enc, heads, t).loss; }, params)
                                            .max_relative_error);
  }
  {
    AsrModel m(tiny_model(), 3);
    NamedParams text;
    m.text_encoder()->collect(text, "text");
    Rng rng(12);
    const Matrix f = gaussian(44, 128, rng);
    errors.emplace_back("most consistency",
                        grad_check([&] { return *consistency_loss(m, f, {{2, 1}}, AttentionPattern::local(2, 2)); },
                                   test_support::without_key_biases(text))
                            .max_relative_error);
    TextMask mask;
    mask.start_probability = 0.3;
    mask.span_frames = 2;
    mask.seed = 3;
    NamedParams recon = text;
    m.ctc_head().collect(recon, "ctc_head");
    errors.emplace_back("most reconstruction",
                        grad_check([&] { return text_reconstruction_loss(m, {{1, 2}}, mask, AttentionPattern::global()).loss; },
                                   test_support::without_key_biases(recon))
                            .max_relative_error);
  }
  {
    ModelConfig cfg = tiny_model();
    cfg.encoder.num_layers = 2;
    cfg.speech_layer = cfg.text_encoder = false;
    auto base = std::make_shared<AsrModel>(cfg, 1);
    AdaptedModel m(base, AdapterConfig{3, 0.0});
    m.add_language("aa", 1);
    Rng rng(13);
    for (auto& [n, t] : m.adapter_parameters("aa"))
      for (auto& v : t.mutable_values()) v += 0.1 * rng.normal();
    const Tensor x = gaussian(24, 128, rng).to_tensor();
    errors.emplace_back(
        "adapters",
        grad_check([&] { return ctc_loss(m.select("aa").log_probs(x, AttentionPattern::local(1, 1)), {{1, 2}}).loss; },
                   m.adapter_parameters("aa"))
            .max_relative_error);
  }
  bool ok = key_bias_zero;
  std::string detail;
  for (const auto& [name, e] : errors) {
    ok = ok && e < 1e-5;
    detail += (detail.empty() ? "" : ", ") + name + "=" + fmt(e, 2);
  }
  return {ok, detail + (key_bias_zero ? "" : ", key-bias gradient not zero")};
}

// ---- 5: quantizer properties ---------------------------------------------

Outcome quantizer_properties() {
  Rng rng(5);
  RandomQuantizer q(512, 16, 4, 256, 5);
  const Matrix frames = gaussian(1000, 512, rng);
  const auto base = quantize(frames, q).labels;
  bool invariant = true;
  for (double alpha : {1e-3, 0.25, 3.7, 1e3}) {
    Matrix s = frames;
    for (auto& v : s.data) v *= alpha;
    invariant = invariant && quantize(s, q).labels == base;
  }

  // Multi-softmax against per-codebook cross-entropies computed by hand.
  MultiSoftmaxHeads heads(6, 4, 5, rng);
  const Matrix e = gaussian(9, 6, rng);
  QuantizedTargets t;
  t.labels.assign(4, std::vector<std::size_t>(9));
  for (auto& row : t.labels)
    for (auto& l : row) l = rng.integer(0, 4);
  t.mask_indices = {0, 3, 4, 8};
  double mean = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const auto& W = heads.heads[n].weight.values();
    const auto& b = heads.heads[n].bias.values();
    double ce = 0;
    for (auto i : t.mask_indices) {
      double logits[5], z = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        logits[c] = b[c];
        for (std::size_t d = 0; d < 6; ++d) logits[c] += e(i, d) * W[d * 5 + c];
      }
      const double mx = *std::max_element(logits, logits + 5);
      for (double l : logits) z += std::exp(l - mx);
      ce += -(logits[t.labels[n][i]] - mx - std::log(z));
    }
    mean += ce / t.mask_indices.size() / 4.0;
  }
  const double diff = std::abs(bestrq_loss(e.to_tensor(), heads, t).loss.item() - mean);

  // Frozen quantizer over a 100-step pre-training run.
  ModelConfig cfg = tiny_model();
  cfg.speech_layer = cfg.text_encoder = false;
  AsrModel model(cfg, 1);
  RandomQuantizer frozen(512, 4, 2, 4, 9);
  const auto checksum = frozen.checksum();
  const std::vector<Matrix> speech = {gaussian(120, 128, rng), gaussian(96, 128, rng), gaussian(80, 128, rng)};
  MaskSpec mask;
  mask.start_probability = 0.05;
  Optimizer opt = make_optimizer(model, AdamSettings{}, AdamSettings{});
  train_loop(opt, 0, 100, [&](std::size_t step) {
    return pretrain_step_loss(model, frozen, speech, 2, step, 1, mask, AttentionPattern::global());
  });
  bool verified = true;
  try {
    frozen.verify();
  } catch (const std::exception&) {
    verified = false;
  }
  const bool ok = invariant && diff <= 1e-12 && frozen.checksum() == checksum && verified;
  return {ok, std::string("scale invariance ") + (invariant ? "exact" : "BROKEN") + " on 1000 frames, |mean diff|=" +
                  fmt(diff, 3) + ", checksum after 100 steps " + (frozen.checksum() == checksum ? "unchanged" : "CHANGED")};
}

// ---- 6: masking coverage -------------------------------------------------

Outcome masking_coverage() {
  MaskSpec spec;
  spec.start_probability = 0.01;
  spec.span_seconds = 0.4;
  const double frame_seconds = 0.01;
  const std::size_t span = static_cast<std::size_t>(std::lround(spec.span_seconds / frame_seconds));
  // An interior frame is covered unless none of the `span` frames ending at
  // it started a span.
  const double expected = 1.0 - std::pow(1.0 - spec.start_probability, static_cast<double>(span));
  const Matrix frames(6000, 4, 1.0);
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    spec.seed = seed;
    const auto r = apply_mask(frames, frame_seconds, spec);
    total += static_cast<double>(r.mask_indices.size()) / frames.rows;
  }
  const double empirical = total / 100;
  const bool ok = std::abs(empirical - expected) <= 0.2 * expected;
  return {ok, "empirical=" + fmt(empirical) + " expected=" + fmt(expected) + " (span " + std::to_string(span) +
                  " frames)"};
}

// ---- 7: frozen contracts -------------------------------------------------

Outcome frozen_contracts() {
  ModelConfig cfg = tiny_model();
  cfg.encoder.num_layers = 2;
  cfg.speech_layer = cfg.text_encoder = false;
  Rng rng(7);
  const Matrix f = gaussian(40, 128, rng);

  // (a) adapter training.
  auto base = std::make_shared<AsrModel>(cfg, 1);
  const auto before = params_checksum(base->parameters());
  AdaptedModel adapted(base, AdapterConfig{2, 0.0});
  adapted.add_language("aa", 1);
  AdamSettings s;
  s.learning_rate = 1e-2;
  s.warmup_steps = 0;
  Optimizer opt;
  opt.add_group("aa", adapted.adapter_parameters("aa"), s);
  bool zero_grads = true;
  const std::vector<PairedUtterance> batch = {{f, {{1, 2}}}, {gaussian(36, 128, rng), {{2}}}};
  for (int i = 0; i < 5; ++i) {
    auto l = asr_batch_loss(*base, batch, AttentionPattern::global(), &adapted.select("aa").adapters());
    l.loss.backward();
    for (const auto& [n, t] : base->parameters())
      if (t.has_grad())
        for (double g : t.grad()) zero_grads = zero_grads && g == 0.0;
    opt.step();
  }
  const bool a = zero_grads && params_checksum(base->parameters()) == before;

  // (b) consistency term.
  AsrModel most_model(tiny_model(), 2);
  auto loss = consistency_loss(most_model, f, {{1, 2, 1}}, AttentionPattern::global());
  loss->backward();
  bool b = true;
  for (const auto& [n, t] : most_model.speech_encoder_parameters())
    if (t.has_grad())
      for (double g : t.grad()) b = b && g == 0.0;

  // (c) zero-init adapters.
  auto fresh = std::make_shared<AsrModel>(cfg, 3);
  const Tensor x = f.to_tensor();
  const Tensor plain = fresh->ctc_log_probs(fresh->encode(x, AttentionPattern::local(4, 4)));
  AdaptedModel zero(fresh, AdapterConfig{2, 0.0});
  zero.add_language("bb", 5);
  const Tensor with = zero.select("bb").log_probs(x, AttentionPattern::local(4, 4));
  const bool c = std::equal(plain.values().begin(), plain.values().end(), with.values().begin(), with.values().end());

  return {a && b && c, std::string("(a) ") + (a ? "ok" : "FAILED") + " (b) " + (b ? "ok" : "FAILED") + " (c) " +
                           (c ? "ok" : "FAILED")};
}

// ---- 8: adapter budget ---------------------------------------------------

Outcome adapter_budget() {
  auto base = std::make_shared<AsrModel>(ModelConfig{}, 1);
  const auto r = AdaptedModel(base, AdapterConfig{}).report();
  const double pct = 100.0 * r.ratio();
  return {pct >= 2.0 && pct <= 2.6, "ratio=" + fmt(pct, 3) + "% (bottleneck " + std::to_string(r.bottleneck) + ", " +
                                        std::to_string(r.adapter_params) + " of " + std::to_string(r.base_params) + ")"};
}

// ---- 9: pre-training benefit ---------------------------------------------

Outcome pretraining_benefit(std::ostream& log) {
  SynthSpec spec;
  spec.seed = 7;
  const auto unlabeled = to_speech(synth_utterances(spec, 10000, 300));
  const auto labeled_utts = synth_utterances(spec, 0, 30);
  const auto held_out = synth_utterances(spec, 100000, 50);
  const ModelConfig cfg;
  const auto labeled = to_paired(TokenVocab(cfg.graphemes), labeled_utts);
  const auto pattern = AttentionPattern::global();
  const std::size_t pretrain_steps = 1000, finetune_steps = 400;

  std::size_t wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    AsrModel pre(cfg, seed);
    RandomQuantizer q(cfg.encoder.input_dim * cfg.encoder.subsampling_factor, cfg.codebook_dim, cfg.num_codebooks,
                      cfg.codebook_size, seed);
    {
      AdamSettings a;
      a.learning_rate = 1e-3;
      Optimizer opt = make_optimizer(pre, a, a);
      train_loop(opt, 0, pretrain_steps, [&](std::size_t step) {
        return pretrain_step_loss(pre, q, unlabeled, 4, step, seed, MaskSpec{}, pattern);
      });
    }
    double cer[2];
    for (int init = 0; init < 2; ++init) {
      AsrModel m(cfg, seed + 1000);
      if (init) m.load_values(pre.encoder_parameters());
      AdamSettings a;
      a.learning_rate = 2e-3;
      Optimizer opt = make_optimizer(m, a, a);
      train_loop(opt, 0, finetune_steps, [&](std::size_t step) {
        return finetune_step_loss(m, labeled, 4, step, seed, pattern);
      });
      cer[init] = evaluate(m, held_out, pattern).pooled.chars.rate();
    }
    wins += cer[1] < cer[0];
    const std::string line = "seed " + std::to_string(seed) + ": random " + fmt(cer[0]) + " pretrained " + fmt(cer[1]);
    log << "  " << line << std::endl;
    detail += (detail.empty() ? "" : "; ") + line;
  }
  return {wins >= 2, std::to_string(wins) + "/3 seeds better; " + detail};
}

// ---- 10: long-form experiment --------------------------------------------

Outcome longform(std::ostream& log) {
  const LongFormExperimentSpec spec;
  const auto report = run_longform(spec, [&](const std::string& msg) { log << "  " << msg << std::endl; });
  log << format_longform_report(report);
  const bool ok = report.enough_seeds && report.chunk_not_worse && report.local_deletions_grow;
  return {ok, "median long WER chunk=" + fmt(report.chunk.median_long_wer) +
                  " local=" + fmt(report.local.median_long_wer) + " (chunk<=local: " +
                  (report.chunk_not_worse ? "yes" : "no") + "); local deletion share short=" +
                  fmt(report.local.median_short_deletion) + " long=" + fmt(report.local.median_long_deletion) +
                  " (grows: " + (report.local_deletions_grow ? "yes" : "no") + ")"};
}

// ---- 11, 12: file-based stages on a small synthetic corpus ---------------

class Corpus {
 public:
  Corpus() : root_(fs::temp_directory_path() / "usm_acceptance") {
    fs::remove_all(root_);
    fs::create_directories(root_);
    SynthSpec spec;
    spec.letters = "abcd";
    spec.max_words = 2;
    spec.max_word_length = 2;
    spec.max_clip_seconds = 1.5;
    write_manifest(root_ / "train.tsv", write_synth_clips(spec, root_ / "wav", "train", 0, 16));
    write_manifest(root_ / "unlabeled.tsv", write_synth_clips(spec, root_ / "wav", "unl", 100, 12, false));
    write_manifest(root_ / "eval.tsv", write_synth_clips(spec, root_ / "wav", "eval", 200, 4));
    std::ofstream(root_ / "text.txt") << "ab cd\nda\nbc a\ndd cb\n";
    std::ofstream(root_ / "base.cfg") << "seed = 3\n"
                                         "batch_size = 4\n"
                                         "model.layers = 1\n"
                                         "model.dim = 16\n"
                                         "model.heads = 2\n"
                                         "model.conv_kernel = 3\n"
                                         "model.ff_multiplier = 2\n"
                                         "model.num_codebooks = 2\n"
                                         "model.codebook_size = 8\n"
                                         "model.codebook_dim = 4\n"
                                         "model.graphemes = [abcd ]\n"
                                         "pattern = local:8:8\n"
                                         "encoder.lr = 3e-3\n"
                                         "decoder.lr = 3e-3\n"
                                         "encoder.warmup = 10\n"
                                         "decoder.warmup = 10\n"
                                         "mask.probability = 0.05\n"
                                         "most.batch_scale = 0.0005\n"
                                         "adapter.bottleneck = 4\n"
                                         "nst.min_wps = 0.1\n"
                                         "nst.max_wps = 20\n"
                                         "train_manifest = train.tsv\n"
                                         "unlabeled_manifest = unlabeled.tsv\n"
                                         "text_manifest = text.txt\n"
                                         "eval_manifest = eval.tsv\n";
  }
  ~Corpus() { fs::remove_all(root_); }

  StageResult run(const std::string& stage, const std::string& out, const std::vector<std::string>& overrides) {
    Config c = Config::load(root_ / "base.cfg");
    c.set("stage", stage);
    c.set("output_dir", (root_ / out).string());
    for (const auto& o : overrides) c.set_override(o);
    return run_stage(TrainConfig::from(c), nullptr);
  }
  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
};

Outcome nst_loop(Corpus& corpus) {
  const auto teacher = corpus.run("finetune", "teacher", {"steps=300"}).checkpoint;
  const std::vector<std::string> o = {"steps=20", "teacher_checkpoint=" + teacher.string()};
  corpus.run("nst", "nst_a", o);
  corpus.run("nst", "nst_b", o);
  const fs::path a = corpus.root() / "nst_a", b = corpus.root() / "nst_b";
  const bool identical = slurp(a / "pseudo_labels.tsv") == slurp(b / "pseudo_labels.tsv") &&
                         slurp(a / "pseudo_kept.tsv") == slurp(b / "pseudo_kept.tsv");

  const auto all = read_pseudo_manifest(a / "pseudo_labels.tsv");
  const auto kept = read_pseudo_manifest(a / "pseudo_kept.tsv");
  const auto once = filter_pseudo(all, 0.1, 20);
  const auto twice = filter_pseudo(once, 0.1, 20);
  bool idempotent = once.size() == kept.size() && twice.size() == once.size();
  for (std::size_t i = 0; idempotent && i < once.size(); ++i)
    idempotent = once[i].audio == twice[i].audio && once[i].hypothesis == twice[i].hypothesis &&
                 once[i].audio == kept[i].audio;

  // Per-step pseudo counts in the metrics against the exact quota: batch b
  // takes floor((b+1)Br) - floor(bBr) supervised items.
  const std::size_t B = 4;
  const double r = kept.empty() ? 1.0 : 0.5;
  bool quotas = true;
  std::size_t steps_seen = 0;
  std::ifstream in(a / "metrics.jsonl");
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::json::parse(line);
    if (j["event"] != "step") continue;
    const std::size_t bi = j["step"];
    const auto sup = static_cast<std::size_t>(std::floor((bi + 1) * B * r) - std::floor(bi * B * r));
    quotas = quotas && j["pseudo_items"].get<double>() == static_cast<double>(B - sup);
    ++steps_seen;
  }
  MixedStream stream(16, std::max<std::size_t>(kept.size(), 1), 0.3, 8, 11);
  std::size_t supervised = 0, total = 0;
  for (std::size_t bi = 0; bi < 10000; ++bi) {
    std::size_t s = 0;
    for (const auto& item : stream.next_batch()) {
      s += item.source == Source::Supervised;
      ++total;
    }
    quotas = quotas && s == static_cast<std::size_t>(std::floor((bi + 1) * 8 * 0.3 + 1e-9) - std::floor(bi * 8 * 0.3 + 1e-9));
    supervised += s;
  }
  quotas = quotas && supervised == 24000 && total == 80000 && steps_seen == 20;

  const bool ok = identical && idempotent && quotas && !kept.empty();
  return {ok, std::to_string(all.size()) + " pseudo-labeled, " + std::to_string(kept.size()) + " kept; manifests " +
                  (identical ? "byte-identical" : "DIFFER") + ", filter " + (idempotent ? "idempotent" : "NOT idempotent") +
                  ", quotas " + (quotas ? "exact" : "WRONG")};
}

Outcome determinism(Corpus& corpus) {
  const auto pre = corpus.run("pretrain", "det_pre", {"steps=5"}).checkpoint;
  const auto ft = corpus.run("finetune", "det_ft", {"steps=5"}).checkpoint;
  const std::vector<std::string> extra = {"init_checkpoint=" + pre.string(), "teacher_checkpoint=" + ft.string()};
  std::string detail;
  bool ok = true;
  for (std::string stage : {"pretrain", "most", "finetune", "adapt", "nst"}) {
    std::vector<std::string> o = {"steps=6"};
    if (stage == "adapt")
      o.push_back("init_checkpoint=" + ft.string());
    else
      o.insert(o.end(), extra.begin(), extra.end());
    const auto x = corpus.run(stage, stage + "_x", o);
    const auto y = corpus.run(stage, stage + "_y", o);
    bool same = x.losses == y.losses && !x.losses.empty();
    const fs::path bin = stage == "adapt" ? fs::path("syn") / "arrays.bin" : fs::path("arrays.bin");
    same = same && slurp(x.checkpoint / bin) == slurp(y.checkpoint / bin);
    ok = ok && same;
    detail += stage + (same ? " ok " : " DIFFERS ");
  }

  // Save/load round trip.
  const Checkpoint loaded = load_checkpoint(ft);
  const AsrModel model = restore_model(loaded);
  Checkpoint again;
  store_model(again, model);
  for (const auto& [k, v] : loaded.meta)
    if (!again.meta.count(k)) again.meta[k] = v;
  for (const auto& a : loaded.arrays())
    if (!again.find(a.name)) again.put(a.name, a.shape, a.values);
  const fs::path copy = corpus.root() / "roundtrip";
  save_checkpoint(copy, again);
  const bool roundtrip = slurp(copy / "arrays.bin") == slurp(ft / "arrays.bin") &&
                         slurp(copy / "manifest.txt") == slurp(ft / "manifest.txt");
  Rng rng(1);
  const Tensor x = gaussian(60, 128, rng).to_tensor();
  const AsrModel reloaded = restore_model(load_checkpoint(copy));
  const auto pattern = AttentionPattern::local(8, 8);
  const Tensor p = model.ctc_log_probs(model.encode(x, pattern));
  const Tensor q = reloaded.ctc_log_probs(reloaded.encode(x, pattern));
  const bool forward = std::equal(p.values().begin(), p.values().end(), q.values().begin(), q.values().end());
  ok = ok && roundtrip && forward;
  return {ok, detail + "; checkpoint bytes " + (roundtrip ? "identical" : "DIFFER") + ", forward " +
                  (forward ? "bit-identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  std::unique_ptr<Corpus> corpus;
  auto with_corpus = [&](std::function<Outcome(Corpus&)> f) {
    return [&corpus, f] {
      if (!corpus) corpus = std::make_unique<Corpus>();
      return f(*corpus);
    };
  };
  struct Criterion {
    int id;
    std::string name;
    double limit_seconds;  // 0 = no hard limit
    std::function<Outcome()> check;
  };
  std::vector<Criterion> criteria = {
      {1, "receptive field local(128,128) x 32", 1, receptive_field_local},
      {2, "receptive field arithmetic", 1, receptive_field_figure},
      {3, "CTC vs exhaustive enumeration", 60, ctc_oracle},
      {4, "finite-difference gradient suite", 300, gradient_suite},
      {5, "quantizer properties", 0, quantizer_properties},
      {6, "masking coverage", 0, masking_coverage},
      {7, "frozen contracts", 0, frozen_contracts},
      {8, "adapter budget", 0, adapter_budget},
      {9, "pre-training benefit", 0, [] { return pretraining_benefit(std::cout); }},
      {10, "long-form degradation", 0, [] { return longform(std::cout); }},
      {11, "NST loop", 0, with_corpus(nst_loop)},
      {12, "determinism and persistence", 0, with_corpus(determinism)},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_seconds > 0 && secs >= c.limit_seconds) {
      o.pass = false;
      o.detail += "; over the " + fmt(c.limit_seconds) + " s limit";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
              << std::fixed << std::setprecision(2) << secs << " s]" << std::defaultfloat << std::endl;
  }
  return failures ? 1 : 0;
}
