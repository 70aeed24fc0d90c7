#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headlab/checkpoint.hpp"
#include "headlab/data.hpp"
#include "headlab/importance.hpp"
#include "headlab/json_io.hpp"
#include "headlab/model.hpp"
#include "headlab/optim.hpp"
#include "headlab/rng.hpp"

namespace headlab {

enum class SamplingMode { Proportional, Annealed };
std::string to_string(SamplingMode m);
SamplingMode sampling_mode_from_string(const std::string& s);

/// Exponent on N_i at 1-based epoch e of E: 1 for proportional sampling,
/// 1 - 0.8 (e - 1) / (E - 1) when annealed. Annealing needs E >= 2.
double sampling_exponent(SamplingMode mode, std::size_t epoch, std::size_t total_epochs);

/// p_i proportional to N_i^epsilon.
std::vector<double> sampling_probs(std::span<const std::size_t> sizes, SamplingMode mode, std::size_t epoch,
                                   std::size_t total_epochs);

/// Index drawn from a discrete distribution with one uniform variate.
std::size_t draw_index(std::span<const double> probs, Rng& rng);

struct TrainSchedule {
  std::size_t epochs = 5;
  SamplingMode sampling = SamplingMode::Proportional;
  double iat_fraction = 0.0;  // delta: share of the final steps trained under IAT
  double iat_alpha = 0.3;
  SelectMode iat_select = SelectMode::Top;  // Random / Bottom give the ablations
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;
  AdamConfig adam{1e-3f, 0.9f, 0.999f, 1e-8f, 0.1, 1, DecayMode::Constant};
  ImportanceOptions importance;

  void validate() const;
};

Json to_json(const TrainSchedule& s);
TrainSchedule train_schedule_from_json(const Json& j);

/// Training examples of one model task.
struct TrainTask {
  std::size_t task = 0;
  std::vector<Example> examples;
};

/// Endless shuffled pass over one dataset; reshuffles on exhaustion.
class TaskStream {
 public:
  TaskStream() = default;
  TaskStream(std::size_t size, std::uint64_t seed);

  std::vector<std::size_t> next(std::size_t count);
  std::size_t passes() const { return passes_; }

  Json state() const;
  void restore(const Json& j);

 private:
  void reshuffle();

  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t passes_ = 0;
};

/// Per-task update permissions for the IAT phase, layer-major over heads.
struct IatMaskSet {
  std::vector<HeadSet> sets;
  std::vector<std::vector<std::uint8_t>> masks;
  std::size_t start_step = 0;
};

void write_mask_csv(std::ostream& out, const IatMaskSet& masks, std::size_t n_layers, std::size_t n_heads);

/// Scores every task on its own training data with the current model and
/// keeps its top-alpha heads (or random / bottom ones) as tunable.
IatMaskSet build_iat_masks(const Model& model, std::span<const TrainTask> tasks, double alpha, SelectMode mode,
                           std::uint64_t seed, const ImportanceOptions& importance, std::size_t start_step);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t task = 0;
  double loss = 0.0;
  double lr = 0.0;
  bool iat = false;
};

Json to_json(const StepRecord& r, const Model& model);

/// Mean loss of one batch, backpropagated into the model's gradients (which
/// are zeroed first).
double accumulate_batch_gradient(Model& model, std::size_t task, std::span<const Example> examples,
                                 std::span<const std::size_t> batch, Rng& dropout_rng);

/// One IAT update for task `task`: attention slices of heads outside the
/// task's mask receive no update and their optimizer moments stay put.
/// Throws ShapeError if the mask set has no entry for `task`.
double iat_step(Model& model, Adam& optimizer, std::size_t task, std::span<const Example> examples,
                std::span<const std::size_t> batch, const IatMaskSet& masks, std::span<const TrainTask> tasks,
                Rng& dropout_rng);

/// Multi-task training loop. Steps are drawn task by task from the sampling
/// law; from step ceil((1 - delta) * total) on, updates follow the IAT masks.
class MultitaskTrainer {
 public:
  MultitaskTrainer(Model& model, std::vector<TrainTask> tasks, TrainSchedule schedule);

  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t total_steps() const { return total_steps_; }
  std::size_t iat_start_step() const { return iat_start_; }
  std::size_t step() const { return step_; }
  bool finished() const { return step_ >= total_steps_; }
  std::size_t epoch() const;  // 1-based epoch of the next step

  const std::optional<IatMaskSet>& masks() const { return masks_; }
  const TrainSchedule& schedule() const { return schedule_; }
  const std::vector<TrainTask>& tasks() const { return tasks_; }
  const Adam& optimizer() const { return adam_; }

  StepRecord step_once();
  /// Runs until finished or `max_steps` more steps; each record is written to
  /// `log` as one JSON line when given.
  void run(std::size_t max_steps = SIZE_MAX, std::ostream* log = nullptr);

  /// Optimizer moments, random streams, masks and the step counter.
  CheckpointExtras extras() const;
  void save(const std::filesystem::path& dir, CheckpointExtras base = {}) const;
  /// Continues a run from save(): `model` must already hold the checkpoint
  /// weights and `tasks` the same data.
  void restore(const CheckpointExtras& extras);

 private:
  Model& model_;
  std::vector<TrainTask> tasks_;
  TrainSchedule schedule_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t total_steps_ = 0;
  std::size_t iat_start_ = 0;
  std::size_t step_ = 0;
  Adam adam_;
  Rng sampler_;
  Rng dropout_;
  std::vector<TaskStream> streams_;
  std::optional<IatMaskSet> masks_;
  std::vector<std::size_t> sizes_;
};

/// Metric of one task over labelled examples under the given gates.
double evaluate_task(const Model& model, std::size_t task, std::span<const Example> examples, Metric metric,
                     const GateVector& gates);

struct TransferOptions {
  std::size_t shots = 16;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  float learning_rate = 1e-3f;
  std::uint64_t seed = 0;
};

/// Fine-tunes a copy of `pretrained` with a fresh head for `spec` on `shots`
/// seeded-random training examples and returns the dev metric. Throws
/// DataError if shots exceeds the training set.
double transfer_finetune(const Model& pretrained, const TaskSpec& spec, std::span<const Example> train,
                         std::span<const Example> dev, const TransferOptions& options);

struct BootstrapResult {
  double p_value = 1.0;
  double mean_difference = 0.0;
  std::size_t resamples = 0;
  bool exact = false;       // every resample enumerated
  bool degenerate = false;  // all differences zero; p set to 1
};

/// One-sided paired bootstrap for "system a beats system b": the share of
/// resamples (over pair indices, with replacement) whose mean difference is
/// <= 0. When n^n <= resamples, all n^n resamples are enumerated instead.
BootstrapResult paired_bootstrap(std::span<const double> a, std::span<const double> b, std::size_t resamples,
                                 std::uint64_t seed);

}  // namespace headlab
