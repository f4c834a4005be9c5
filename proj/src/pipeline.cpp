#include "usm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>
#include <stdexcept>

#include "usm/checkpoint.hpp"
#include "usm/data.hpp"
#include "usm/nst.hpp"
#include "usm/random.hpp"

namespace usm {

namespace fs = std::filesystem;
using nlohmann::json;

Stage parse_stage(const std::string& name) {
  if (name == "pretrain") return Stage::Pretrain;
  if (name == "most") return Stage::Most;
  if (name == "finetune") return Stage::Finetune;
  if (name == "adapt") return Stage::Adapt;
  if (name == "nst") return Stage::Nst;
  throw std::invalid_argument("unknown stage '" + name + "' (pretrain, most, finetune, adapt, nst)");
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::Pretrain: return "pretrain";
    case Stage::Most: return "most";
    case Stage::Finetune: return "finetune";
    case Stage::Adapt: return "adapt";
    case Stage::Nst: return "nst";
  }
  return "?";
}

namespace {

std::size_t count(const Config& c, const std::string& key, std::size_t fallback) {
  const long long v = c.integer(key, static_cast<long long>(fallback));
  if (v < 0) throw std::invalid_argument("config: '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

AdamSettings adam_from(const Config& c, const std::string& prefix, const AdamSettings& base) {
  AdamSettings s = base;
  s.learning_rate = c.number(prefix + ".lr", s.learning_rate);
  s.warmup_steps = count(c, prefix + ".warmup", s.warmup_steps);
  s.beta1 = c.number(prefix + ".beta1", s.beta1);
  s.beta2 = c.number(prefix + ".beta2", s.beta2);
  s.epsilon = c.number(prefix + ".epsilon", s.epsilon);
  s.clip_norm = c.number(prefix + ".clip_norm", c.number("clip_norm", s.clip_norm));
  return s;
}

std::optional<fs::path> existing_path(const Config& c, const std::string& key) {
  if (!c.has(key)) return std::nullopt;
  fs::path p = c.path(key);
  if (!fs::exists(p)) throw std::runtime_error("config: " + key + " does not exist: " + p.string());
  return p;
}

std::string graphemes_value(const Config& c, const std::string& fallback) {
  if (!c.has("model.graphemes")) return fallback;
  std::string v = c.str("model.graphemes");
  // Bracketed so that a trailing space survives trimming.
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  return v;
}

}  // namespace

TrainConfig TrainConfig::from(const Config& c) {
  TrainConfig t;
  t.stage = parse_stage(c.str("stage"));
  if (!c.has("seed")) throw std::invalid_argument("config: 'seed' is required");
  const long long seed = c.integer("seed");
  if (seed < 0) throw std::invalid_argument("config: seed must be non-negative");
  t.seed = static_cast<std::uint64_t>(seed);
  t.output_dir = c.path("output_dir");
  t.init_checkpoint = existing_path(c, "init_checkpoint");
  t.teacher_checkpoint = existing_path(c, "teacher_checkpoint");
  t.resume = c.flag("resume", false);

  t.steps = count(c, "steps", 0);
  t.batch_size = count(c, "batch_size", t.batch_size);
  if (t.batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
  t.checkpoint_every = count(c, "checkpoint_every", 0);
  t.log_every = std::max<std::size_t>(1, count(c, "log_every", 1));
  t.eval_every = count(c, "eval_every", 0);
  t.pattern = AttentionPattern::parse(c.str("pattern", "global"));

  ModelConfig& m = t.model;
  auto& e = m.encoder;
  e.num_layers = count(c, "model.layers", e.num_layers);
  e.model_dim = count(c, "model.dim", e.model_dim);
  e.attention_heads = count(c, "model.heads", e.attention_heads);
  e.conv_kernel_size = count(c, "model.conv_kernel", e.conv_kernel_size);
  e.subsampling_factor = count(c, "model.subsampling", e.subsampling_factor);
  e.input_dim = count(c, "model.input_dim", e.input_dim);
  e.ff_multiplier = count(c, "model.ff_multiplier", e.ff_multiplier);
  e.relative_attention = c.flag("model.relative_attention", e.relative_attention);
  e.rel_pos_cap = count(c, "model.rel_pos_cap", default_rel_pos_cap(t.pattern));
  e.use_convolution = c.flag("model.use_convolution", e.use_convolution);
  e.validate();
  m.graphemes = graphemes_value(c, m.graphemes);
  m.num_codebooks = count(c, "model.num_codebooks", m.num_codebooks);
  m.codebook_size = count(c, "model.codebook_size", m.codebook_size);
  m.codebook_dim = count(c, "model.codebook_dim", m.codebook_dim);
  m.text_upsample = count(c, "model.text_upsample", m.text_upsample);
  m.speech_layer = c.flag("model.speech_layer", t.stage == Stage::Most);
  m.text_encoder = c.flag("model.text_encoder", t.stage == Stage::Most);

  t.encoder_optimizer = adam_from(c, "encoder", AdamSettings{});
  t.decoder_optimizer = adam_from(c, "decoder", AdamSettings{});
  AdamSettings adapter_defaults;
  adapter_defaults.learning_rate = 2e-3;
  t.adapter_optimizer = adam_from(c, "adapter", adapter_defaults);

  t.mask.start_probability = c.number("mask.probability", t.mask.start_probability);
  t.mask.span_seconds = c.number("mask.span_seconds", t.mask.span_seconds);
  t.mask.noise_mean = c.number("mask.noise_mean", t.mask.noise_mean);
  t.mask.noise_std = c.number("mask.noise_std", t.mask.noise_std);
  t.mask.validate();

  t.train_manifest = existing_path(c, "train_manifest");
  t.unlabeled_manifest = existing_path(c, "unlabeled_manifest");
  t.text_manifest = existing_path(c, "text_manifest");
  t.eval_manifest = existing_path(c, "eval_manifest");

  t.most_weights.bestrq = c.number("most.weight.bestrq", 1.0);
  t.most_weights.asr = c.number("most.weight.asr", 1.0);
  t.most_weights.consistency = c.number("most.weight.consistency", 1.0);
  t.most_weights.reconstruction = c.number("most.weight.reconstruction", 1.0);
  t.most_weights.validate();
  t.most_batch = MostBatchSizes::scaled(c.number("most.batch_scale", 1.0 / 1024.0));
  if (c.has("most.gate")) t.most_gate = count(c, "most.gate", 0);
  t.text_mask.start_probability = c.number("most.text_mask.probability", t.text_mask.start_probability);
  t.text_mask.span_frames = count(c, "most.text_mask.span_frames", t.text_mask.span_frames);
  t.text_mask.noise_std = c.number("most.text_mask.noise_std", t.text_mask.noise_std);

  t.adapter.bottleneck_dim = count(c, "adapter.bottleneck", 0);
  t.adapter.target_ratio = c.number("adapter.ratio", t.adapter.target_ratio);

  t.nst_min_wps = c.number("nst.min_wps", t.nst_min_wps);
  t.nst_max_wps = c.number("nst.max_wps", t.nst_max_wps);
  t.nst_supervised_ratio = c.number("nst.supervised_ratio", t.nst_supervised_ratio);
  if (!(t.nst_min_wps < t.nst_max_wps)) throw std::invalid_argument("config: nst.min_wps must be < nst.max_wps");

  auto need = [&](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("config: stage " + stage_name(t.stage) + " requires " + what);
  };
  switch (t.stage) {
    case Stage::Pretrain: need(t.unlabeled_manifest.has_value(), "unlabeled_manifest"); break;
    case Stage::Most:
      need(t.init_checkpoint.has_value(), "init_checkpoint (a pre-trained checkpoint)");
      need(t.unlabeled_manifest.has_value(), "unlabeled_manifest");
      need(t.train_manifest.has_value(), "train_manifest");
      break;
    case Stage::Finetune: need(t.train_manifest.has_value(), "train_manifest"); break;
    case Stage::Adapt:
      need(t.init_checkpoint.has_value(), "init_checkpoint (the frozen base)");
      need(t.train_manifest.has_value(), "train_manifest");
      break;
    case Stage::Nst:
      need(t.teacher_checkpoint.has_value(), "teacher_checkpoint");
      need(t.unlabeled_manifest.has_value(), "unlabeled_manifest");
      need(t.train_manifest.has_value(), "train_manifest");
      break;
  }
  t.resolved = c;
  return t;
}

std::string TrainConfig::run_fingerprint() const {
  return stage_name(stage) + "/" + std::to_string(seed) + "/" + pattern.to_string() + "/" + model.fingerprint();
}

MetricsLog::MetricsLog(const fs::path& path, std::ostream* echo, bool append) : echo_(echo) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot write " + path.string());
}

void MetricsLog::write(const std::string& line) {
  out_ << line << '\n';
  out_.flush();
  if (echo_) *echo_ << line << std::endl;
}

std::vector<std::string> read_text_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

std::vector<std::string> eval_report_json(const EvalReport& report, std::size_t step) {
  std::vector<std::string> lines;
  auto line = [&](const std::string& language, const Scores& s) {
    json j;
    j["event"] = "eval";
    j["step"] = step;
    j["language"] = language;
    j["utterances"] = s.utterances;
    j["wer"] = s.words.rate();
    j["cer"] = s.chars.rate();
    j["substitutions"] = s.words.substitutions;
    j["deletions"] = s.words.deletions;
    j["insertions"] = s.words.insertions;
    j["reference_words"] = s.words.reference_length;
    lines.push_back(j.dump());
  };
  for (const auto& [lang, s] : report.per_language) line(lang, s);
  if (report.pooled.utterances) line("pooled", report.pooled);
  return lines;
}

namespace {

std::vector<Utterance> load_manifest_utterances(const fs::path& manifest) {
  auto entries = read_manifest(manifest);
  if (entries.empty()) throw std::runtime_error(manifest.string() + ": manifest is empty");
  return load_utterances(entries);
}

std::vector<LabelSequence> load_text(const TokenVocab& vocab, const fs::path& path) {
  std::vector<LabelSequence> out;
  for (const auto& line : read_text_lines(path)) out.push_back(to_labels(vocab, line));
  return out;
}

// Copies every parameter of `init` except the CTC head into `model`.
// Inference parameters missing from `init` are an error; parameters the
// init model lacks (e.g. a new speech-only layer) keep their fresh values.
void initialize_encoder(AsrModel& model, const Checkpoint& init, bool require_speech_layer) {
  NamedParams source;
  for (auto& [name, t] : init.params("model."))
    if (name.rfind("ctc_head.", 0) != 0) source.emplace_back(name, t);
  std::set<std::string> present;
  for (const auto& [name, t] : source) present.insert(name);
  std::vector<std::string> missing;
  for (const auto& [name, t] : model.inference_parameters()) {
    if (name.rfind("ctc_head.", 0) == 0) continue;
    if (!require_speech_layer && name.rfind("speech_layer.", 0) == 0) continue;
    if (!present.count(name)) missing.push_back(name);
  }
  if (!missing.empty()) {
    std::string msg = "init checkpoint lacks encoder arrays:";
    for (const auto& n : missing) msg += " " + n;
    throw std::runtime_error(msg);
  }
  model.load_values(source);
}

RandomQuantizer make_quantizer(const ModelConfig& m, std::uint64_t seed) {
  return RandomQuantizer(m.encoder.input_dim * m.encoder.subsampling_factor, m.codebook_dim, m.num_codebooks,
                         m.codebook_size, derive_seed(seed, {0x5155414e54}));
}

json step_record(Stage stage, std::size_t step, const StepLoss& l) {
  json j;
  j["event"] = "step";
  j["stage"] = stage_name(stage);
  j["step"] = step;
  j["loss"] = l.total.item();
  for (const auto& [k, v] : l.components) j[k] = v;
  return j;
}

// Shared loop for the single-model stages: resume, periodic checkpoints,
// metrics, optional evaluation, final checkpoint.
struct Trainer {
  const TrainConfig& config;
  AsrModel& model;
  RandomQuantizer* quantizer;
  Optimizer& optimizer;
  MetricsLog& log;
  std::vector<Utterance> eval_data;

  fs::path checkpoint_dir() const { return config.output_dir / "checkpoint"; }

  void save(std::size_t step) const {
    Checkpoint ck;
    store_model(ck, model);
    if (quantizer) store_quantizer(ck, *quantizer);
    optimizer.save_state(ck);
    ck.meta["stage"] = stage_name(config.stage);
    ck.meta["step"] = std::to_string(step);
    ck.meta["seed"] = std::to_string(config.seed);
    ck.meta["pattern"] = config.pattern.to_string();
    ck.meta["run_fingerprint"] = config.run_fingerprint();
    save_checkpoint(checkpoint_dir(), ck);
    json j;
    j["event"] = "checkpoint";
    j["step"] = step;
    j["path"] = checkpoint_dir().string();
    j["params_checksum"] = params_checksum(model.parameters());
    log.write(j.dump());
  }

  // Returns the step to start from.
  std::size_t maybe_resume() {
    if (!config.resume || !fs::exists(checkpoint_dir() / "manifest.txt")) return 0;
    Checkpoint ck = load_checkpoint(checkpoint_dir());
    const std::string& fp = ck.meta_at("run_fingerprint");
    if (fp != config.run_fingerprint())
      throw std::runtime_error("resume: checkpoint fingerprint " + fp + " does not match this run (" +
                               config.run_fingerprint() + ")");
    model.load_values(ck.params("model."));
    if (quantizer) {
      auto q = restore_quantizer(ck);
      if (!q) throw std::runtime_error("resume: checkpoint has no quantizer");
      if (q->checksum() != quantizer->checksum())
        throw std::runtime_error("resume: quantizer differs from the one this seed produces");
    }
    optimizer.load_state(ck);
    const std::size_t step = std::stoul(ck.meta_at("step"));
    json j;
    j["event"] = "resume";
    j["step"] = step;
    log.write(j.dump());
    return step;
  }

  void evaluate_now(std::size_t step) const {
    if (eval_data.empty()) return;
    for (const auto& line : eval_report_json(evaluate(model, eval_data, config.pattern), step)) log.write(line);
  }

  StageResult run(const LossFn& loss) {
    StageResult result;
    result.checkpoint = checkpoint_dir();
    result.start_step = maybe_resume();
    const std::size_t end = std::max(result.start_step, config.steps);
    if (result.start_step == 0) save(0);
    try {
      train_loop(optimizer, result.start_step, end, loss, [&](std::size_t step, const StepLoss& l) {
        result.losses.push_back(l.total.item());
        const std::size_t done = step + 1;
        if (done % config.log_every == 0 || done == end) log.write(step_record(config.stage, step, l).dump());
        if (config.eval_every && done % config.eval_every == 0 && done != end) evaluate_now(done);
        if (config.checkpoint_every && done % config.checkpoint_every == 0 && done != end) save(done);
      });
    } catch (const TrainingDiverged& e) {
      json j;
      j["event"] = "diverged";
      j["step"] = e.step;
      j["message"] = e.what();
      log.write(j.dump());
      throw;
    }
    result.end_step = end;
    if (end != result.start_step) save(end);
    evaluate_now(end);
    return result;
  }
};

struct StageSetup {
  MetricsLog log;
  StageSetup(const TrainConfig& config, std::ostream* echo)
      : log((fs::create_directories(config.output_dir), config.output_dir / "metrics.jsonl"), echo, config.resume) {
    std::ofstream resolved(config.output_dir / "config.resolved");
    resolved << config.resolved.dump();
    json j;
    j["event"] = "start";
    j["stage"] = stage_name(config.stage);
    j["seed"] = config.seed;
    j["steps"] = config.steps;
    j["pattern"] = config.pattern.to_string();
    j["model_fingerprint"] = config.model.fingerprint();
    log.write(j.dump());
  }
};

std::vector<Utterance> eval_set(const TrainConfig& config) {
  return config.eval_manifest ? load_manifest_utterances(*config.eval_manifest) : std::vector<Utterance>{};
}

}  // namespace

StageResult run_pretrain(const TrainConfig& config, std::ostream* echo) {
  StageSetup setup(config, echo);
  const auto speech = to_speech(load_manifest_utterances(*config.unlabeled_manifest));
  AsrModel model(config.model, config.seed);
  if (config.init_checkpoint) initialize_encoder(model, load_checkpoint(*config.init_checkpoint), false);
  RandomQuantizer quantizer = make_quantizer(config.model, config.seed);
  Optimizer opt = make_optimizer(model, config.encoder_optimizer, config.decoder_optimizer);
  Trainer trainer{config, model, &quantizer, opt, setup.log, {}};
  return trainer.run([&](std::size_t step) {
    return pretrain_step_loss(model, quantizer, speech, config.batch_size, step, config.seed, config.mask,
                              config.pattern);
  });
}

StageResult run_finetune(const TrainConfig& config, std::ostream* echo) {
  StageSetup setup(config, echo);
  AsrModel model(config.model, config.seed);
  if (config.init_checkpoint)
    initialize_encoder(model, load_checkpoint(*config.init_checkpoint), config.model.speech_layer);
  const auto data = to_paired(model.vocab(), load_manifest_utterances(*config.train_manifest));
  if (data.empty()) throw std::runtime_error("finetune: train_manifest has no transcribed entries");
  Optimizer opt = make_optimizer(model, config.encoder_optimizer, config.decoder_optimizer);
  Trainer trainer{config, model, nullptr, opt, setup.log, eval_set(config)};
  return trainer.run([&](std::size_t step) {
    return finetune_step_loss(model, data, config.batch_size, step, config.seed, config.pattern);
  });
}

StageResult run_most(const TrainConfig& config, std::ostream* echo) {
  StageSetup setup(config, echo);
  AsrModel model(config.model, config.seed);
  const Checkpoint init = load_checkpoint(*config.init_checkpoint);
  initialize_encoder(model, init, false);
  RandomQuantizer quantizer = restore_quantizer(init).value_or(make_quantizer(config.model, config.seed));

  const auto speech = to_speech(load_manifest_utterances(*config.unlabeled_manifest));
  const auto paired = to_paired(model.vocab(), load_manifest_utterances(*config.train_manifest));
  const auto text = config.text_manifest ? load_text(model.vocab(), *config.text_manifest)
                                         : std::vector<LabelSequence>{};
  if (paired.empty()) throw std::runtime_error("most: train_manifest has no transcribed entries");

  MostOptions options;
  options.weights = config.most_weights;
  options.gate_step = config.most_gate.value_or(curriculum_gate(config.steps));
  options.speech_mask = config.mask;
  options.speech_mask.seed = derive_seed(config.seed, {0x4d534b});
  options.text_mask = config.text_mask;
  options.text_mask.seed = derive_seed(config.seed, {0x544d534b});
  options.pattern = config.pattern;
  const MostBatchSizes sizes = config.most_batch;

  Optimizer opt = make_optimizer(model, config.encoder_optimizer, config.decoder_optimizer);
  Trainer trainer{config, model, &quantizer, opt, setup.log, eval_set(config)};
  return trainer.run([&](std::size_t step) {
    MostBatch batch;
    batch.unlabeled_speech =
        take(speech, batch_indices(speech.size(), sizes.unlabeled_speech, step, derive_seed(config.seed, {1})));
    batch.paired = take(paired, batch_indices(paired.size(), sizes.paired, step, derive_seed(config.seed, {2})));
    if (!text.empty())
      batch.unlabeled_text =
          take(text, batch_indices(text.size(), sizes.unlabeled_text, step, derive_seed(config.seed, {3})));
    MostStepResult r = most_step(model, quantizer, batch, options, step);
    return StepLoss{r.total,
                    {{"bestrq", r.bestrq},
                     {"asr", r.asr},
                     {"consistency", r.consistency},
                     {"reconstruction", r.reconstruction},
                     {"gate_open", r.gate_open ? 1.0 : 0.0}}};
  });
}

StageResult run_adapt(const TrainConfig& config, std::ostream* echo) {
  StageSetup setup(config, echo);
  if (config.resume) throw std::invalid_argument("adapt: resume is not supported; rerun the stage");
  auto base = std::make_shared<AsrModel>(restore_model(load_checkpoint(*config.init_checkpoint)));
  const std::uint64_t base_checksum = params_checksum(base->inference_parameters());
  AdaptedModel adapted(base, config.adapter);

  std::map<std::string, std::vector<PairedUtterance>> by_language;
  for (const auto& u : load_manifest_utterances(*config.train_manifest))
    if (u.labeled) by_language[u.language].push_back({u.features, to_labels(base->vocab(), u.transcript)});
  if (by_language.empty()) throw std::runtime_error("adapt: train_manifest has no transcribed entries");

  const AdapterReport report = adapted.report();
  {
    json j;
    j["event"] = "adapters";
    j["bottleneck"] = report.bottleneck;
    j["base_params"] = report.base_params;
    j["adapter_params_per_language"] = report.adapter_params;
    j["ratio"] = report.ratio();
    setup.log.write(j.dump());
  }

  StageResult result;
  result.checkpoint = config.output_dir / "adapters";
  result.end_step = config.steps;
  std::uint64_t lang_index = 0;
  for (const auto& [lang, data] : by_language) {
    adapted.add_language(lang, derive_seed(config.seed, {0x414450, lang_index++}));
    Optimizer opt;
    opt.add_group("adapter." + lang, adapted.adapter_parameters(lang), config.adapter_optimizer);
    const std::uint64_t order_seed = derive_seed(config.seed, {0x41444f, lang_index});
    for (std::size_t step = 0; step < config.steps; ++step) {
      auto batch = take(data, batch_indices(data.size(), config.batch_size, step, order_seed));
      const double loss = adapter_train_step(adapted, batch, lang, opt, config.pattern);
      if (!std::isfinite(loss)) {
        json j;
        j["event"] = "diverged";
        j["language"] = lang;
        j["step"] = step;
        setup.log.write(j.dump());
        throw TrainingDiverged(step, loss);
      }
      result.losses.push_back(loss);
      if ((step + 1) % config.log_every == 0 || step + 1 == config.steps) {
        json j;
        j["event"] = "step";
        j["stage"] = "adapt";
        j["language"] = lang;
        j["step"] = step;
        j["loss"] = loss;
        setup.log.write(j.dump());
      }
    }
  }
  save_adapters(result.checkpoint, adapted);

  const std::uint64_t after = params_checksum(base->inference_parameters());
  json j;
  j["event"] = "frozen_check";
  j["base_checksum_before"] = base_checksum;
  j["base_checksum_after"] = after;
  j["unchanged"] = after == base_checksum;
  setup.log.write(j.dump());
  if (after != base_checksum) throw std::logic_error("adapt: base parameters changed");

  if (config.eval_manifest)
    for (const auto& line : eval_report_json(evaluate(*base, load_manifest_utterances(*config.eval_manifest),
                                                      config.pattern, &adapted),
                                             config.steps))
      setup.log.write(line);
  return result;
}

StageResult run_nst(const TrainConfig& config, std::ostream* echo) {
  StageSetup setup(config, echo);
  const AsrModel teacher = restore_model(load_checkpoint(*config.teacher_checkpoint));
  const auto unlabeled = read_manifest(*config.unlabeled_manifest);
  if (unlabeled.empty()) throw std::runtime_error("nst: unlabeled manifest is empty");

  PseudoLabelRun labeled = pseudo_label(teacher, config.pattern, unlabeled);
  for (const auto& s : labeled.skipped) {
    json j;
    j["event"] = "skipped";
    j["reason"] = s;
    setup.log.write(j.dump());
  }
  const auto kept = filter_pseudo(labeled.items, config.nst_min_wps, config.nst_max_wps);
  {
    // Mark kept items in the full listing too.
    auto all = labeled.items;
    std::set<std::string> kept_paths;
    for (const auto& k : kept) kept_paths.insert(k.audio.string());
    for (auto& it : all) it.kept = kept_paths.count(it.audio.string()) != 0;
    write_pseudo_manifest(config.output_dir / "pseudo_labels.tsv", all);
    write_pseudo_manifest(config.output_dir / "pseudo_kept.tsv", kept);
    json j;
    j["event"] = "pseudo_labels";
    j["labeled"] = labeled.items.size();
    j["skipped"] = labeled.skipped.size();
    j["kept"] = kept.size();
    j["min_wps"] = config.nst_min_wps;
    j["max_wps"] = config.nst_max_wps;
    setup.log.write(j.dump());
  }

  AsrModel model(config.model, config.seed);
  if (config.init_checkpoint)
    initialize_encoder(model, load_checkpoint(*config.init_checkpoint), config.model.speech_layer);
  const auto supervised = to_paired(model.vocab(), load_manifest_utterances(*config.train_manifest));
  std::vector<PairedUtterance> pseudo;
  for (const auto& k : kept) {
    ManifestEntry e{k.audio, k.duration, k.hypothesis, k.language};
    Utterance u = load_utterance(e);
    pseudo.push_back({u.features, to_labels(model.vocab(), k.hypothesis)});
  }
  const double ratio = pseudo.empty() ? 1.0 : config.nst_supervised_ratio;
  auto make_stream = [&] {
    return MixedStream(supervised.size(), pseudo.size(), ratio, config.batch_size, derive_seed(config.seed, {0x4d4958}));
  };
  MixedStream stream = make_stream();
  std::size_t stream_step = 0;

  Optimizer opt = make_optimizer(model, config.encoder_optimizer, config.decoder_optimizer);
  Trainer trainer{config, model, nullptr, opt, setup.log, eval_set(config)};
  return trainer.run([&](std::size_t step) {
    // The stream is stateful; fast-forward it after a resume.
    if (step < stream_step) {
      stream = make_stream();
      stream_step = 0;
    }
    while (stream_step < step) {
      stream.next_batch();
      ++stream_step;
    }
    std::vector<PairedUtterance> batch;
    std::size_t from_pseudo = 0;
    for (const auto& item : stream.next_batch()) {
      if (item.source == Source::Pseudo) ++from_pseudo;
      batch.push_back(item.source == Source::Supervised ? supervised[item.index] : pseudo[item.index]);
    }
    ++stream_step;
    AsrBatchLoss l = asr_batch_loss(model, batch, config.pattern);
    return StepLoss{l.loss,
                    {{"ctc", l.loss.item()},
                     {"pseudo_items", static_cast<double>(from_pseudo)},
                     {"infeasible", static_cast<double>(l.infeasible)}}};
  });
}

StageResult run_stage(const TrainConfig& config, std::ostream* echo) {
  switch (config.stage) {
    case Stage::Pretrain: return run_pretrain(config, echo);
    case Stage::Most: return run_most(config, echo);
    case Stage::Finetune: return run_finetune(config, echo);
    case Stage::Adapt: return run_adapt(config, echo);
    case Stage::Nst: return run_nst(config, echo);
  }
  throw std::logic_error("unreachable");
}

EvalReport run_eval(const fs::path& checkpoint, const fs::path& manifest, const AttentionPattern& pattern,
                    const std::optional<fs::path>& adapters_dir) {
  auto model = std::make_shared<AsrModel>(restore_model(load_checkpoint(checkpoint)));
  const auto data = load_manifest_utterances(manifest);
  if (std::none_of(data.begin(), data.end(), [](const Utterance& u) { return u.labeled; }))
    throw std::runtime_error(manifest.string() + ": no reference transcripts");
  if (!adapters_dir) return evaluate(*model, data, pattern);
  // Size the adapters like the stored sets.
  AdapterConfig adapter_config;
  for (const auto& entry : fs::directory_iterator(*adapters_dir))
    if (fs::exists(entry.path() / "manifest.txt")) {
      adapter_config.bottleneck_dim = std::stoul(load_checkpoint(entry.path()).meta_at("bottleneck"));
      break;
    }
  AdaptedModel adapted(model, adapter_config);
  load_adapters(*adapters_dir, adapted);
  return evaluate(*model, data, pattern, &adapted);
}

RtfReport run_rtf(const fs::path& checkpoint, const fs::path& manifest, const RtfOptions& options) {
  const AsrModel model = restore_model(load_checkpoint(checkpoint));
  std::vector<AudioClip> clips;
  for (const auto& e : read_manifest(manifest)) clips.push_back(read_wav(e.audio));
  return rtf_bench(model, clips, options);
}

}  // namespace usm
