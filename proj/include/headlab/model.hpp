#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headlab/autograd.hpp"
#include "headlab/optim.hpp"
#include "headlab/rng.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

enum class Activation { Gelu, Relu };
enum class Pooling { First, Mean };

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t model_dim = 16;
  std::size_t key_dim = 4;
  std::size_t value_dim = 4;
  std::size_t ff_dim = 32;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 32;
  std::size_t n_segments = 2;
  float dropout = 0.1f;
  Activation activation = Activation::Gelu;
  bool causal = false;

  /// Throws ConfigError unless all dims are >= 1 and n_heads * value_dim == model_dim.
  void validate() const;
  std::size_t head_count() const { return n_layers * n_heads; }
};

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;
  auto operator<=>(const HeadId&) const = default;
};

/// One gate per (layer, head), stored layer-major.
class GateVector {
 public:
  GateVector() = default;
  GateVector(std::size_t n_layers, std::size_t n_heads, float fill = 1.0f);

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_heads() const { return n_heads_; }
  std::size_t size() const { return values_.size(); }
  std::size_t index(HeadId h) const;
  HeadId head_at(std::size_t flat) const { return {flat / n_heads_, flat % n_heads_}; }

  float operator[](HeadId h) const { return values_[index(h)]; }
  /// Rejects values outside [0, 1].
  void set(HeadId h, float value);
  /// Finite-difference probes only: permits values in [0, 1 + max_probe].
  void set_probe(HeadId h, float value);
  void fill(float value);

  std::span<const float> values() const { return values_; }
  bool within_unit_interval() const;

 private:
  std::size_t n_layers_ = 0;
  std::size_t n_heads_ = 0;
  std::vector<float> values_;
};

inline constexpr float kMaxGateProbe = 1e-2f;

enum class TaskKind { Classification, Regression };

struct TaskHead {
  std::string name;
  TaskKind kind = TaskKind::Classification;
  std::size_t n_class = 2;
  Pooling pooling = Pooling::First;
  std::size_t weight_index = 0;
  std::size_t bias_index = 0;

  std::size_t output_width() const { return kind == TaskKind::Regression ? 1 : n_class; }
};

/// A tokenized example. Padding is not part of the input: the encoder runs
/// over exactly ids.size() positions.
struct EncodedInput {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segments;
};

/// An encoded input with its target: a class index or a real value.
struct Example {
  EncodedInput input;
  double label = 0.0;
};

/// Tape handles recorded during one forward pass, indexed layer * n_heads + head.
struct ForwardTrace {
  std::vector<Var> head_outputs;   // A_h(X)
  std::vector<Var> gated_outputs;  // xi_h * A_h(X)
  std::vector<Var> mha_outputs;    // per layer, before dropout and residual
  std::vector<Var> layer_outputs;  // per layer encoder output
};

struct ForwardOptions {
  bool training = false;        // enables dropout; requires dropout_rng
  Rng* dropout_rng = nullptr;
  bool allow_gate_probe = false;
  ForwardTrace* trace = nullptr;
};

/// Per-head activations and pooled per-layer representations of one input.
struct HeadCapture {
  std::vector<Tensor> head_outputs;  // L * n_h tensors of shape n x d_v
  std::vector<Tensor> pooled;        // L tensors of shape 1 x d
};

/// Parameter slice owned by one head inside a fused attention tensor.
struct HeadSlice {
  std::size_t param_index = 0;
  enum class Axis { Columns, Rows } axis = Axis::Columns;
  std::size_t begin = 0;
  std::size_t width = 0;
};

/// Gated multi-head attention encoder (post-layer-norm, BERT style) with one
/// linear output head per registered task.
///
/// Query, key and value projections of a layer are stored as single
/// d x (n_h * d_k) matrices; head h owns columns [h * d_k, (h + 1) * d_k)
/// and the matching bias entries. The output projection is
/// (n_h * d_v) x d and head h owns rows [h * d_v, (h + 1) * d_v). The output
/// projection carries no bias, so every attention parameter belongs to
/// exactly one head.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  std::size_t add_task(const std::string& name, TaskKind kind, std::size_t n_class,
                       Pooling pooling, std::uint64_t seed);
  std::size_t task_count() const { return tasks_.size(); }
  const TaskHead& task(std::size_t i) const;
  std::optional<std::size_t> find_task(const std::string& name) const;
  const std::vector<TaskHead>& tasks() const { return tasks_; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  std::optional<std::size_t> find_param(const std::string& name) const;
  void zero_grad();

  GateVector& gates() { return gates_; }
  const GateVector& gates() const { return gates_; }

  /// Parameter count implied by the config and the registered tasks.
  std::size_t expected_parameter_count() const;
  std::size_t parameter_count() const;

  /// Records gate leaves on the tape; differentiable gates expose dL/dxi.
  std::vector<Var> bind_gates(Tape& tape, const GateVector& gates, bool differentiable) const;

  /// Forward pass with parameters as constants. Returns a 1 x width output row.
  Var forward(Tape& tape, const EncodedInput& input, std::size_t task, std::span<const Var> gates,
              const ForwardOptions& options = {}) const;
  /// Forward pass whose backward accumulates into the parameters' gradients.
  Var forward_trainable(Tape& tape, const EncodedInput& input, std::size_t task,
                        std::span<const Var> gates, const ForwardOptions& options = {});

  /// Task loss on one example: cross-entropy for classification, squared
  /// error for regression.
  Var loss(Tape& tape, Var output, std::size_t task, double label) const;

  /// Eval-mode output row for one input under the given gates.
  Tensor output(const EncodedInput& input, std::size_t task, const GateVector& gates) const;
  /// Class index (classification) or value (regression).
  double predict(const EncodedInput& input, std::size_t task, const GateVector& gates) const;

  /// Straight single-head attention over an n x d input.
  Tensor attention_head(const Tensor& x, HeadId head) const;
  /// Gated MHA output of one layer, before residual and normalisation.
  Tensor mha_forward(const Tensor& x, std::size_t layer, const GateVector& gates) const;

  HeadCapture capture_head_outputs(const EncodedInput& input, std::size_t task,
                                   Pooling pooling) const;

  std::vector<HeadSlice> head_slices(HeadId head) const;
  /// Update masks for Adam: attention slices of heads with tunable[h] == 0
  /// are frozen, every other element is free.
  std::vector<ElementMask> update_masks(std::span<const std::uint8_t> tunable) const;

  /// Zeroes the output projection rows consuming a head.
  void zero_output_rows(HeadId head);

 private:
  struct LayerParams {
    std::size_t wq, bq, wk, bk, wv, bv, wo;
    std::size_t attn_gamma, attn_beta;
    std::size_t ff_in_w, ff_in_b, ff_out_w, ff_out_b;
    std::size_t ff_gamma, ff_beta;
  };

  std::size_t add_param(std::string name, std::vector<std::size_t> shape);
  void init_normal(std::size_t index, float stddev, Rng& rng);
  void check_gates(std::span<const Var> gates, const Tape& tape, bool allow_probe) const;
  Var run(Tape& tape, std::span<const Var> p, const EncodedInput& input, std::size_t task,
          std::span<const Var> gates, const ForwardOptions& options) const;
  Var attention(Tape& tape, std::size_t head, Var q_all, Var k_all, Var v_all) const;
  Var mha(Tape& tape, std::span<const Var> p, Var x, std::size_t layer, std::span<const Var> gates,
          ForwardTrace* trace) const;
  Var dropout(Tape& tape, Var x, const ForwardOptions& options) const;
  std::vector<Var> bind_constants(Tape& tape) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<LayerParams> layers_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, seg_emb_ = 0, emb_gamma_ = 0, emb_beta_ = 0;
  std::vector<TaskHead> tasks_;
  GateVector gates_;
};

}  // namespace headlab
