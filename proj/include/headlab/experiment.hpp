#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "headlab/data.hpp"
#include "headlab/dissociation.hpp"
#include "headlab/importance.hpp"
#include "headlab/json_io.hpp"
#include "headlab/similarity.hpp"
#include "headlab/trainer.hpp"

namespace headlab {

inline constexpr int kConfigVersion = 1;
inline constexpr int kReportVersion = 1;

/// Where a task's examples come from: a synthetic generator or TSV files.
struct TaskSource {
  enum class Type { Synth, Tsv } type = Type::Synth;
  SynthKind synth_kind = SynthKind::Topic;
  std::size_t size = 2000;
  std::optional<std::uint64_t> seed;  // synth data seed; derived from the run seed when absent
  std::filesystem::path train_path;
  std::optional<std::filesystem::path> dev_path;
  double train_fraction = 0.9;
};

struct TaskConfig {
  TaskSpec spec;
  Pooling pooling = Pooling::First;
  TaskSource source;
};

struct AnalysisConfig {
  double alpha = 0.3;
  SelectMode select = SelectMode::Top;
  std::uint64_t select_seed = 0;
  ImportanceOptions importance;
  Thresholds thresholds;
  std::vector<std::string> similarity;  // any of "dse", "cra", "ahp"
  std::optional<std::filesystem::path> probe_file;
  std::size_t probe_count = 1000;
  std::optional<std::size_t> layer;  // final layer when absent
  Pooling representation_pooling = Pooling::Mean;
  RdmStatistic statistic = RdmStatistic::Spearman;
  TransferOptions transfer;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ModelConfig model;
  bool vocab_size_given = false;  // otherwise sized from the built vocabulary
  std::size_t max_len = 32;
  std::vector<TaskConfig> tasks;
  TrainSchedule schedule;
  AnalysisConfig analysis;
  std::optional<std::filesystem::path> output;

  /// Ranges, unique task names, referenced files. Throws ConfigError naming the field.
  void validate() const;
};

/// Relative paths are resolved against base_dir. Unknown keys are errors.
ExperimentConfig experiment_config_from_json(const Json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& file);
Json to_json(const ExperimentConfig& c);

/// Output directory: the flag if given, else $HEADLAB_OUT, else the config's
/// "output", else ./headlab_out.
std::filesystem::path resolve_output_dir(const std::optional<std::filesystem::path>& flag,
                                         const ExperimentConfig* config);

/// Tokenised task data ready for training and evaluation.
struct PreparedExperiment {
  ExperimentConfig config;
  Vocabulary vocab;
  std::vector<Dataset> data;
  std::vector<std::vector<Example>> train;
  std::vector<std::vector<Example>> dev;
};

/// Loads or generates every task. The vocabulary is built from the training
/// splits unless one is supplied (e.g. from a checkpoint).
PreparedExperiment prepare_experiment(const ExperimentConfig& config,
                                      const std::optional<Vocabulary>& vocab = std::nullopt);

/// Fresh model with one head per configured task, in config order.
Model build_model(const PreparedExperiment& p);
std::vector<TrainTask> train_tasks(const PreparedExperiment& p);
/// Throws ConfigError unless the model's tasks match the config's, in order.
void check_model_tasks(const Model& model, const ExperimentConfig& config);

/// Dev metric of each task under the given gates.
std::vector<double> evaluate_all(const Model& model, const PreparedExperiment& p, const GateVector& gates);

struct TrainOutcome {
  Json report;
  std::string params_digest;
};

struct TrainRunOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  std::size_t max_steps = SIZE_MAX;             // stop early (checkpoint stays resumable)
};

/// Trains (with IAT when delta > 0) and writes checkpoint/, train.log.jsonl,
/// metrics.csv, iat_masks.csv (IAT only) and report.json under out.
TrainOutcome run_train(const ExperimentConfig& config, const std::filesystem::path& out,
                       const TrainRunOptions& options = {});

struct IapResult {
  ImportanceMatrix importance;
  std::vector<HeadSet> sets;
  DissociationReport dissociation;
};

/// Importance per task on its training split, head selection, and the
/// prune table (every task evaluated with every task's heads gated off).
IapResult run_iap(const Model& model, const PreparedExperiment& p);

/// Writes importance.csv, head_sets.csv, prune_table.csv, overlap.csv,
/// layer_distribution.csv and report.json for a trained checkpoint.
Json run_prune_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& out, bool importance_only = false);

/// Dissociation from a prune-table CSV; writes report.json and the table.
Json run_dissociate_csv(const std::filesystem::path& table, double alpha, const Thresholds& t,
                        const std::filesystem::path& out);

/// Trains a single-task model per source and fine-tunes it on every target;
/// writes transfer.csv (rows = source, columns = target) and report.json.
Json run_transfer(const ExperimentConfig& config, const std::filesystem::path& out);

struct NamedCheckpoint {
  std::string task;
  std::filesystem::path dir;
};

struct SimilarityRequest {
  std::vector<NamedCheckpoint> models;
  std::vector<std::string> probes;
  std::vector<std::string> metrics;  // dse, cra, ahp
  std::optional<std::filesystem::path> transfer_csv;
  std::optional<std::size_t> layer;
  Pooling pooling = Pooling::Mean;
  RdmStatistic statistic = RdmStatistic::Spearman;
  std::size_t max_len = 32;
};

Json run_similarity(const SimilarityRequest& request, const std::filesystem::path& out);

/// Probe sentences, one per line; blank lines skipped. At most `count` are
/// kept; a warning goes to `warn` when fewer are available.
std::vector<std::string> read_probes(const std::filesystem::path& file, std::size_t count, std::ostream* warn);

/// Square task matrix CSV as written by write_similarity_csv.
SimilarityMatrix read_similarity_csv(std::istream& in);
/// `task_a,task_b,value` rows after a header.
std::vector<std::tuple<std::string, std::string, double>> read_pair_csv(std::istream& in);

/// Correlates similarity against dissociation over the task pairs present in both.
Json run_correlate(const std::filesystem::path& similarity_csv, const std::filesystem::path& dissociation_csv,
                   const std::filesystem::path& out);

/// Train, then importance, pruning and dissociation, all under out.
Json run_report(const ExperimentConfig& config, const std::filesystem::path& out);

/// Gradient, gate and persistence invariants on small random models. One
/// line per check goes to out; returns true when all pass.
bool run_selfcheck(std::ostream& out, std::size_t seeds = 5);

void write_json_file(const std::filesystem::path& file, const Json& j);
Json read_json_file(const std::filesystem::path& file);

}  // namespace headlab
