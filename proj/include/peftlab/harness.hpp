#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "peftlab/pretrain.hpp"
#include "peftlab/prompt_mixture.hpp"
#include "peftlab/stats.hpp"
#include "peftlab/teacher.hpp"

namespace peftlab {

enum class DataTier { manual, automatic };

std::string_view to_string(DataTier tier);
DataTier tier_from_string(std::string_view text);

struct TrainConfig {
  Method method = Method::finetune;
  DataTier tier = DataTier::manual;
  TrainHyper hyper;
  std::size_t pl = 16;
  bool upsample = true;  // balance the positive class of the training split

  // epochs >= 1, batch_size >= 1, lr > 0, pl >= 1 for prompt methods.
  void validate() const;

  // Keys under the prefix: method, tier, epochs, batch_size, lr, eval_every,
  // seed, pl, upsample. Missing keys keep the values of `defaults`.
  static TrainConfig from_config(const KeyValueConfig& cfg, std::string_view prefix,
                                 const TrainConfig& defaults);
  static TrainConfig from_config(const KeyValueConfig& cfg, std::string_view prefix);
  std::string to_text(std::string_view prefix = "") const;
};

// Threshold-0.5 metrics of the classifier on reports labeled for the organ.
MetricsReport evaluate(const EncoderModel<float>& model, const PromptSet<float>* prompts,
                       const Vocabulary& vocab, std::span<const Report> reports,
                       const std::string& organ);

// Training and validation data for one organ; the training reports are
// upsampled when the config asks for it.
struct TaskData {
  LabeledData train, val;
};
TaskData prepare_task(const TrainConfig& config, const Vocabulary& vocab,
                      std::span<const Report> train, std::span<const Report> val,
                      const std::string& organ, std::size_t max_len);

// Runs the configured method and returns the restored best checkpoint. For
// multitask the returned prompts are the exported target prompt; the module
// and weights are written to `mixture` when given.
AdaptationResult train_with_checkpointing(const TrainConfig& config,
                                          const EncoderModel<float>& model,
                                          const LabeledData& train, const LabeledData& val,
                                          const SourcePromptBank<float>* bank = nullptr,
                                          std::optional<MultitaskResult>* mixture = nullptr);

// ---------------------------------------------------------------------------
// Experiment matrix

struct ExperimentConfig {
  std::string target = "liver";
  std::uint64_t seed = 1;         // master seed for training runs
  std::uint64_t corpus_seed = 1;  // seed for all generated data
  std::size_t k = 5;              // seeded runs per row
  std::size_t pl = 16;
  std::size_t vocab_size = 256;
  bool upsample = true;

  CorpusConfig manual, automatic, teacher_pool;
  SplitRatios split;
  double teacher_val_fraction = 0.2;  // of teacher-pool patients
  ModelConfig model;
  PretrainHyper pretrain;
  TrainHyper teacher;
  TrainConfig source;  // per-organ prompt tuning of the source bank
  TrainConfig finetune_manual, prompt_manual, finetune_auto, prompt_auto, multitask;

  ExperimentConfig();
  void validate() const;

  // Flat key=value text; unknown keys are rejected.
  static ExperimentConfig from_config(const KeyValueConfig& cfg);
  // Every field, defaults included.
  std::string to_text() const;
};

struct ExperimentData {
  std::vector<Report> manual;        // human labels for every organ
  std::vector<Report> automatic;     // unlabeled until annotated
  std::vector<Report> teacher_pool;  // human labels; trains the teacher
  Split manual_split;
  Vocabulary vocab;
};

ExperimentData generate_experiment_data(const ExperimentConfig& config);

// A data directory holds manual.jsonl, automatic.jsonl, teacher_pool.jsonl,
// manual_{train,val,test}.jsonl, split.json and vocab.txt. Returns the files
// written.
std::vector<std::filesystem::path> save_experiment_data(const std::filesystem::path& dir,
                                                        const ExperimentData& data);
ExperimentData load_experiment_data(const std::filesystem::path& dir);

// Masked-token pretraining on impressions and findings of the automatic tier
// and teacher pool. Losses are appended to `losses` when given.
EncoderModel<float> pretrain_backbone(const ExperimentConfig& config, const ExperimentData& data,
                                      std::vector<double>* losses = nullptr);

TeacherTraining train_experiment_teacher(const ExperimentConfig& config, const ExperimentData& data,
                                         const EncoderModel<float>& backbone);

// Prompt tuning on each organ of the annotated automatic tier, validated on
// the manual validation split.
SourcePromptBank<float> train_source_bank(const ExperimentConfig& config,
                                          const EncoderModel<float>& backbone,
                                          const Vocabulary& vocab,
                                          std::span<const Report> automatic,
                                          std::span<const Report> validation,
                                          std::ostream* log = nullptr);

struct RunRecord {
  std::uint64_t seed = 0;
  double val_f1 = 0;              // recorded at the selected checkpoint
  double val_f1_reevaluated = 0;  // the restored checkpoint evaluated afresh
  MetricsReport test;
  std::size_t trainable_count = 0;
  double selected_epoch = 0;
  std::size_t selected_step = 0;
  std::size_t steps = 0;
  bool degenerate_validation = false;
  std::vector<double> mixture_weights;  // multitask only
};

struct RowResult {
  std::string name;
  Method method = Method::finetune;
  DataTier tier = DataTier::manual;
  std::string organ;
  std::vector<RunRecord> runs;
  std::string error;  // non-empty when the row could not run

  std::size_t trainable_count() const;
  MeanSd val_f1() const;
  MeanSd test_f1() const;
  MeanSd precision() const;
  MeanSd recall() const;
  std::vector<double> test_f1_values() const;
  std::vector<std::uint64_t> seeds() const;

  std::string to_json() const;  // the row metrics document
  static RowResult from_json(std::string_view text);
};

struct SignificanceResult {
  std::string better, other;  // row names; tests mean(better - other) > 0
  TTestResult test;
};

struct MatrixResult {
  std::vector<RowResult> rows;
  std::vector<SignificanceResult> significance;
  std::vector<std::string> warnings;

  std::string to_json() const;
  std::string to_table() const;
};

// Table columns in display order.
std::vector<std::string> table_columns();

// One seeded run: trains on `train`, selects the checkpoint on `val` and
// scores it on `test`. When `dir` is given it receives config.txt,
// metrics.json (a one-run row document named `row_name`), training.json and
// the checkpoints; multitask runs add mixture.ckpt and weights.json.
RunRecord run_single(const TrainConfig& config, std::uint64_t seed, const EncoderModel<float>& backbone,
                     const Vocabulary& vocab, std::span<const Report> train,
                     std::span<const Report> val, std::span<const Report> test,
                     const std::string& organ, const SourcePromptBank<float>* bank,
                     const std::filesystem::path* dir, const std::string& row_name);

// Seeds shared by every row so runs pair by index.
std::vector<std::uint64_t> run_seeds(const ExperimentConfig& config);

// The five rows over k seeds plus both significance tests. When `out_dir` is
// given every run writes config, metrics and checkpoint under
// <out_dir>/runs/<row>/seed-<i>/ and every row writes <out_dir>/rows/<row>/.
MatrixResult run_experiment_matrix(const ExperimentConfig& config,
                                   const std::filesystem::path* out_dir = nullptr,
                                   std::ostream* log = nullptr);

// Table from row metrics documents: rows in the given order, duplicates kept
// with a warning, t-tests for multitask rows against finetune and prompt rows
// of the same tier when their seeds match.
MatrixResult assemble_report(std::vector<RowResult> rows);

}  // namespace peftlab
