// usm: command-line front end for the training stages and utilities.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "usm/data.hpp"
#include "usm/encoder.hpp"
#include "usm/longform.hpp"
#include "usm/pipeline.hpp"
#include "usm/rtf.hpp"
#include "usm/synth.hpp"

namespace fs = std::filesystem;

namespace {

struct StageArgs {
  std::string config;
  std::vector<std::string> overrides;
};

void add_stage(CLI::App& app, const std::string& name, const std::string& description, StageArgs& args) {
  auto* cmd = app.add_subcommand(name, description);
  cmd->add_option("-c,--config", args.config, "config file")->required()->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", args.overrides, "key=value override (repeatable)");
  cmd->callback([name, &args] {
    usm::Config cfg = usm::Config::load(args.config);
    for (const auto& o : args.overrides) cfg.set_override(o);
    cfg.set("stage", name);
    const auto train = usm::TrainConfig::from(cfg);
    const auto result = usm::run_stage(train, &std::cout);
    std::cerr << name << ": steps " << result.start_step << ".." << result.end_step << ", output "
              << result.checkpoint.string() << "\n";
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech encoder training stages, evaluation and diagnostics"};
  app.require_subcommand(1);

  StageArgs pretrain, most, finetune, adapt, nst;
  add_stage(app, "pretrain", "self-supervised masked-prediction pre-training", pretrain);
  add_stage(app, "most", "joint speech/text pre-training from a pre-trained checkpoint", most);
  add_stage(app, "finetune", "CTC fine-tuning", finetune);
  add_stage(app, "adapt", "per-language residual adapters on a frozen base", adapt);
  add_stage(app, "nst", "pseudo-label, filter, mix and train a student", nst);

  std::string ckpt, manifest, pattern_text = "global", adapters, metrics_out;
  auto* eval = app.add_subcommand("eval", "greedy-decode a manifest and report WER/CER");
  eval->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--pattern", pattern_text, "global | local:L:R | chunk:N");
  eval->add_option("--adapters", adapters, "adapter directory from the adapt stage")->check(CLI::ExistingDirectory);
  eval->add_option("--metrics", metrics_out, "also append records to this file");
  eval->callback([&] {
    std::optional<fs::path> adapter_dir;
    if (!adapters.empty()) adapter_dir = adapters;
    const auto report = usm::run_eval(ckpt, manifest, usm::AttentionPattern::parse(pattern_text), adapter_dir);
    std::ofstream out;
    if (!metrics_out.empty()) out.open(metrics_out, std::ios::app);
    for (const auto& line : usm::eval_report_json(report, 0)) {
      std::cout << line << "\n";
      if (out) out << line << "\n";
    }
  });

  std::size_t rf_layers = 32, rf_frame_ms = 40, rf_kernel = 5;
  std::string rf_pattern = "local:128:128";
  auto* rf = app.add_subcommand("rf-report", "receptive field of an encoder configuration");
  rf->add_option("--layers", rf_layers)->check(CLI::PositiveNumber);
  rf->add_option("--pattern", rf_pattern, "global | local:L:R | chunk:N");
  rf->add_option("--frame-ms", rf_frame_ms, "encoder frame duration")->check(CLI::PositiveNumber);
  rf->add_option("--conv-kernel", rf_kernel)->check(CLI::PositiveNumber);
  rf->callback([&] {
    usm::ConformerConfig cfg;
    cfg.num_layers = rf_layers;
    cfg.conv_kernel_size = rf_kernel;
    std::cout << usm::format_receptive_field(
        usm::receptive_field(cfg, usm::AttentionPattern::parse(rf_pattern), rf_frame_ms));
  });

  usm::RtfOptions rtf_options;
  std::string rtf_pattern = "global", rtf_out;
  auto* rtf = app.add_subcommand("rtf", "inference throughput (audio seconds per wall second)");
  rtf->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingDirectory);
  rtf->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  rtf->add_option("--batch", rtf_options.batch_size)->check(CLI::PositiveNumber);
  rtf->add_option("--repeats", rtf_options.repeats)->check(CLI::PositiveNumber);
  rtf->add_option("--pattern", rtf_pattern);
  rtf->add_option("--metrics", rtf_out, "also append the report to this file");
  rtf->callback([&] {
    rtf_options.pattern = usm::AttentionPattern::parse(rtf_pattern);
    const auto line = usm::rtf_report_json(usm::run_rtf(ckpt, manifest, rtf_options));
    std::cout << line << "\n";
    if (!rtf_out.empty()) std::ofstream(rtf_out, std::ios::app) << line << "\n";
  });

  usm::SynthSpec spec;
  std::string synth_dir, synth_name = "clip";
  std::size_t synth_first = 0, synth_concat = 0;
  bool synth_unlabeled = false;
  auto* synth = app.add_subcommand("synth", "write a synthetic spoken-token corpus and its manifest");
  synth->add_option("--out", synth_dir, "output directory")->required();
  synth->add_option("--name", synth_name, "file prefix; the manifest is <out>/<name>.tsv");
  synth->add_option("--count", spec.num_clips)->check(CLI::PositiveNumber);
  synth->add_option("--first", synth_first, "index of the first clip");
  synth->add_option("--seed", spec.seed);
  synth->add_option("--letters", spec.letters);
  synth->add_option("--language", spec.language);
  synth->add_option("--noise", spec.noise_level);
  synth->add_option("--max-seconds", spec.max_clip_seconds);
  synth->add_option("--concat", synth_concat, "join this many clips per output (long-form set)");
  synth->add_flag("--unlabeled", synth_unlabeled, "write '-' instead of transcripts");
  synth->callback([&] {
    spec.validate();
    const fs::path dir = synth_dir;
    auto entries = synth_concat > 1
                       ? usm::write_synth_longform(spec, dir, synth_name, synth_first, spec.num_clips, synth_concat)
                       : usm::write_synth_clips(spec, dir, synth_name, synth_first, spec.num_clips, !synth_unlabeled);
    if (synth_unlabeled)
      for (auto& e : entries) e.transcript.reset();
    const fs::path out = dir / (synth_name + ".tsv");
    usm::write_manifest(out, entries);
    std::cout << out.string() << ": " << entries.size() << " clips\n";
  });

  usm::LongFormExperimentSpec lf;
  std::string lf_plot;
  auto* longform = app.add_subcommand("longform", "short-segment training vs long-form decoding, local vs chunk");
  longform->add_option("--steps", lf.steps);
  longform->add_option("--seeds", lf.seeds)->expected(3, 16);
  longform->add_option("--concat", lf.concat_factor);
  longform->add_option("--plot", lf_plot, "write step/pattern/seed/WER data here");
  longform->callback([&] {
    const auto report = usm::run_longform(lf, [](const std::string& m) { std::cerr << m << "\n"; });
    std::cout << usm::format_longform_report(report);
    if (!lf_plot.empty()) usm::write_longform_plot_data(lf_plot, report);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
