#include "usm/longform.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "usm/training.hpp"

namespace usm {

void LongFormExperimentSpec::validate() const {
  corpus.validate();
  if (seeds.size() < 3) throw std::invalid_argument("longform: at least 3 seeds required");
  if (local.kind != AttentionKind::Local || chunk.kind != AttentionKind::Chunk)
    throw std::invalid_argument("longform: compare a local pattern with a chunk pattern");
  ConformerConfig cfg;
  cfg.num_layers = num_layers;
  const auto rf = receptive_field(cfg, local);
  const double max_clip_frames = corpus.max_clip_seconds / 0.040;
  if (rf.attention_rf_frames <= max_clip_frames)
    throw std::invalid_argument("longform: local receptive field does not exceed the training clip length");
  if (steps == 0 || batch_size == 0 || eval_every == 0) throw std::invalid_argument("longform: zero steps");
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

PatternSummary summarize(const std::vector<LongFormRun>& runs, const std::string& pattern) {
  PatternSummary s;
  s.pattern = pattern;
  std::vector<double> sw, lw, sd, ld;
  for (const auto& r : runs) {
    if (r.pattern != pattern || r.diverged) continue;
    ++s.surviving_seeds;
    sw.push_back(r.short_words.rate());
    lw.push_back(r.long_words.rate());
    sd.push_back(r.short_words.deletion_rate());
    ld.push_back(r.long_words.deletion_rate());
  }
  if (s.surviving_seeds == 0) return s;
  s.median_short_wer = median(sw);
  s.median_long_wer = median(lw);
  s.median_short_deletion = median(sd);
  s.median_long_deletion = median(ld);
  return s;
}

}  // namespace

LongFormReport run_longform(const LongFormExperimentSpec& spec, const ProgressFn& progress) {
  spec.validate();
  auto say = [&](const std::string& m) { if (progress) progress(m); };
  say("generating corpus");
  const auto train = synth_utterances(spec.corpus, 0, spec.train_clips);
  const auto short_eval = synth_utterances(spec.corpus, 1000000, spec.short_eval_clips);
  const auto long_eval = synth_longform_utterances(spec.corpus, 2000000, spec.long_eval_clips, spec.concat_factor);
  {
    ConformerConfig cfg;
    cfg.num_layers = spec.num_layers;
    const std::size_t rf = receptive_field(cfg, spec.local).attention_rf_frames;
    for (const auto& u : long_eval)
      if (u.features.rows / cfg.subsampling_factor <= rf)
        throw std::invalid_argument("longform: evaluation clip " + u.id + " is not longer than the local receptive field (" +
                                    std::to_string(rf) + " frames); raise concat_factor");
  }

  LongFormReport report;
  for (const auto& pattern : {spec.local, spec.chunk}) {
    for (auto seed : spec.seeds) {
      LongFormRun run;
      run.pattern = pattern.to_string();
      run.seed = seed;
      ModelConfig cfg;
      cfg.encoder.num_layers = spec.num_layers;
      cfg.encoder.rel_pos_cap = default_rel_pos_cap(pattern);
      AsrModel model(cfg, seed);
      AdamSettings adam;
      adam.learning_rate = spec.learning_rate;
      adam.warmup_steps = spec.warmup_steps;
      Optimizer opt = make_optimizer(model, adam, adam);
      const auto data = to_paired(model.vocab(), train);
      try {
        train_loop(
            opt, 0, spec.steps,
            [&](std::size_t step) { return finetune_step_loss(model, data, spec.batch_size, step, seed, pattern); },
            [&](std::size_t step, const StepLoss&) {
              if ((step + 1) % spec.eval_every != 0 && step + 1 != spec.steps) return;
              const double w = evaluate(model, long_eval, pattern).pooled.words.rate();
              run.curve.emplace_back(step + 1, w);
              std::ostringstream os;
              os << run.pattern << " seed " << seed << " step " << step + 1 << " long-form WER " << w;
              say(os.str());
            });
        run.short_words = evaluate(model, short_eval, pattern).pooled.words;
        run.long_words = evaluate(model, long_eval, pattern).pooled.words;
      } catch (const TrainingDiverged& e) {
        run.diverged = true;
        say(run.pattern + " seed " + std::to_string(seed) + ": " + e.what());
      }
      report.runs.push_back(std::move(run));
    }
  }
  report.local = summarize(report.runs, spec.local.to_string());
  report.chunk = summarize(report.runs, spec.chunk.to_string());
  report.enough_seeds = report.local.surviving_seeds >= 2 && report.chunk.surviving_seeds >= 2;
  report.chunk_not_worse = report.enough_seeds && report.chunk.median_long_wer <= report.local.median_long_wer;
  report.local_deletions_grow =
      report.enough_seeds && report.local.median_long_deletion > report.local.median_short_deletion;
  return report;
}

void write_longform_plot_data(const std::filesystem::path& path, const LongFormReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step\tpattern\tseed\tlongform_wer\n";
  char buf[32];
  for (const auto& r : report.runs)
    for (const auto& [step, w] : r.curve) {
      std::snprintf(buf, sizeof buf, "%.6f", w);
      out << step << '\t' << r.pattern << '\t' << r.seed << '\t' << buf << '\n';
    }
}

std::string format_longform_report(const LongFormReport& report) {
  std::ostringstream os;
  char buf[256];
  os << "pattern          seed  short_wer  short_del  long_wer  long_del  long_S/D/I\n";
  for (const auto& r : report.runs) {
    if (r.diverged) {
      std::snprintf(buf, sizeof buf, "%-16s %4llu  diverged (excluded)\n", r.pattern.c_str(),
                    static_cast<unsigned long long>(r.seed));
    } else {
      std::snprintf(buf, sizeof buf, "%-16s %4llu  %9.4f  %9.4f  %8.4f  %8.4f  %zu/%zu/%zu\n", r.pattern.c_str(),
                    static_cast<unsigned long long>(r.seed), r.short_words.rate(), r.short_words.deletion_rate(),
                    r.long_words.rate(), r.long_words.deletion_rate(), r.long_words.substitutions,
                    r.long_words.deletions, r.long_words.insertions);
    }
    os << buf;
  }
  for (const auto* s : {&report.local, &report.chunk}) {
    std::snprintf(buf, sizeof buf,
                  "median %-16s seeds=%zu short_wer=%.4f long_wer=%.4f short_del=%.4f long_del=%.4f\n",
                  s->pattern.c_str(), s->surviving_seeds, s->median_short_wer, s->median_long_wer,
                  s->median_short_deletion, s->median_long_deletion);
    os << buf;
  }
  os << "chunk_long_wer<=local_long_wer " << (report.chunk_not_worse ? "yes" : "no") << "\n";
  os << "local_long_deletions>short_deletions " << (report.local_deletions_grow ? "yes" : "no") << "\n";
  return os.str();
}

}  // namespace usm
