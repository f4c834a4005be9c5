// File-based training stages: each reads a Config, writes its resolved
// config, a JSON-lines metrics stream and a checkpoint directory under
// output_dir, and can resume from that checkpoint.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "usm/adapters.hpp"
#include "usm/bestrq.hpp"
#include "usm/config.hpp"
#include "usm/model.hpp"
#include "usm/most.hpp"
#include "usm/optimizer.hpp"
#include "usm/rtf.hpp"
#include "usm/training.hpp"

namespace usm {

enum class Stage { Pretrain, Most, Finetune, Adapt, Nst };
Stage parse_stage(const std::string& name);
std::string stage_name(Stage stage);

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  std::optional<std::filesystem::path> init_checkpoint;
  std::optional<std::filesystem::path> teacher_checkpoint;
  bool resume = false;

  std::size_t steps = 0;
  std::size_t batch_size = 4;
  std::size_t checkpoint_every = 0;  // 0 = only at the end
  std::size_t log_every = 1;
  std::size_t eval_every = 0;        // 0 = only at the end (when eval_manifest is set)
  AttentionPattern pattern;
  ModelConfig model;
  AdamSettings encoder_optimizer;
  AdamSettings decoder_optimizer;
  MaskSpec mask;

  std::optional<std::filesystem::path> train_manifest;      // labeled
  std::optional<std::filesystem::path> unlabeled_manifest;  // speech only
  std::optional<std::filesystem::path> text_manifest;       // one transcript per line
  std::optional<std::filesystem::path> eval_manifest;

  MostLossWeights most_weights;
  MostBatchSizes most_batch;
  std::optional<std::size_t> most_gate;  // default curriculum_gate(steps)
  TextMask text_mask;

  AdapterConfig adapter;
  AdamSettings adapter_optimizer;

  double nst_min_wps = 0.5, nst_max_wps = 6.0;
  double nst_supervised_ratio = 0.5;

  Config resolved;

  // Validates: seed present, stage known, every referenced file exists,
  // and the manifests the stage needs are set.
  static TrainConfig from(const Config& config);

  // Identifies a run for resumption: stage, seed, pattern and model shapes.
  std::string run_fingerprint() const;
};

// Append-only JSON lines to a file, echoed to a stream.
class MetricsLog {
 public:
  MetricsLog(const std::filesystem::path& path, std::ostream* echo, bool append);
  void write(const std::string& json_line);

 private:
  std::ofstream out_;
  std::ostream* echo_;
};

struct StageResult {
  std::filesystem::path checkpoint;
  std::size_t start_step = 0;  // > 0 when resumed
  std::size_t end_step = 0;
  std::vector<double> losses;  // one per step run by this invocation
};

// All stages log to output_dir/metrics.jsonl and write
// output_dir/config.resolved. `echo` may be null.
StageResult run_stage(const TrainConfig& config, std::ostream* echo);

StageResult run_pretrain(const TrainConfig& config, std::ostream* echo);
StageResult run_most(const TrainConfig& config, std::ostream* echo);
StageResult run_finetune(const TrainConfig& config, std::ostream* echo);
// Trains `steps` steps per language found in train_manifest; adapters are
// written to output_dir/adapters/<tag>. No resume.
StageResult run_adapt(const TrainConfig& config, std::ostream* echo);
// Pseudo-labels unlabeled_manifest with the teacher, writes
// output_dir/pseudo_labels.tsv (every item) and pseudo_kept.tsv (after
// filtering), then trains a student on the supervised/pseudo mix.
StageResult run_nst(const TrainConfig& config, std::ostream* echo);

// Reads a plain-text transcript list: one per line, blank lines skipped.
std::vector<std::string> read_text_lines(const std::filesystem::path& path);

// Evaluation and RTF on a saved checkpoint. Adapters, when given, are
// applied per utterance language.
EvalReport run_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                    const AttentionPattern& pattern,
                    const std::optional<std::filesystem::path>& adapters_dir = std::nullopt);
std::vector<std::string> eval_report_json(const EvalReport& report, std::size_t step);

RtfReport run_rtf(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                  const RtfOptions& options);

}  // namespace usm
