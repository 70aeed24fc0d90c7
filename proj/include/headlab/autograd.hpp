#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "headlab/tensor.hpp"

namespace headlab {

/// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  MatMulTransB,
  Add,
  AddRowBroadcast,
  AddConst,
  MulConst,
  ScaleByVar,
  ScaleConst,
  SoftmaxRows,
  LayerNorm,
  Gelu,
  Relu,
  ConcatCols,
  SliceCols,
  SliceRows,
  GatherRows,
  MeanRows,
  CrossEntropy,
  SquaredError,
};

std::string_view op_name(OpKind kind);

/// Reverse-mode tape over 2-D float tensors.
///
/// Ops are recorded in execution order, so parents always precede children.
/// A tape supports exactly one backward pass; afterwards values and
/// gradients stay readable but no further ops may be recorded until clear().
/// All reductions run in a fixed left-to-right order, so identical inputs
/// give bit-identical gradients.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Var constant(Tensor value);
  Var variable(Tensor value);  // differentiable, gradient read via grad()
  Var parameter(Parameter& p, bool trainable = true);

  Var matmul(Var a, Var b);
  Var matmul_transposed(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var add_row_broadcast(Var x, Var row);
  Var add_const(Var x, const Tensor& c);
  Var mul_const(Var x, const Tensor& c);
  Var scale(Var x, Var scalar);  // scalar is 1x1
  Var scale(Var x, float c);
  Var softmax_rows(Var x);
  Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-12f);
  Var gelu(Var x);
  Var relu(Var x);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var x, std::size_t offset, std::size_t width);
  Var slice_rows(Var x, std::size_t offset, std::size_t count);
  Var gather_rows(Var table, std::span<const std::int32_t> ids);
  Var mean_rows(Var x);
  Var cross_entropy(Var logits, std::size_t target);
  Var squared_error(Var prediction, float target);

  /// Populates gradients of every differentiable node reachable from loss and
  /// accumulates them into the bound Parameters.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  /// Gradient of a node after backward(). Empty for constants.
  const Tensor& grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  bool spent() const { return spent_; }
  void clear();

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::uint32_t a = UINT32_MAX;
    std::uint32_t b = UINT32_MAX;
    std::uint32_t c = UINT32_MAX;
    bool needs_grad = false;
    Parameter* param = nullptr;
    Tensor value;
    Tensor grad;
    std::vector<float> cache;
    std::vector<std::uint32_t> parts;
    std::vector<std::int32_t> ids;
    float scalar = 0.0f;
    std::size_t offset = 0;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void check_open(OpKind kind) const;
  void backprop_node(Node& n);

  std::vector<Node> nodes_;
  bool spent_ = false;
};

}  // namespace headlab
