#include "headlab/autograd.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "headlab/error.hpp"

namespace headlab {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulTransB: return "matmul_transposed";
    case OpKind::Add: return "add";
    case OpKind::AddRowBroadcast: return "add_row_broadcast";
    case OpKind::AddConst: return "add_const";
    case OpKind::MulConst: return "mul_const";
    case OpKind::ScaleByVar: return "scale_by_var";
    case OpKind::ScaleConst: return "scale_const";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Relu: return "relu";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::MeanRows: return "mean_rows";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::SquaredError: return "squared_error";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_mismatch(OpKind kind, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " +
                   shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

// out[r, :] += a[r, :] * b   (a: n x k, b: k x m)
void gemm_acc(const float* a, const float* b, float* out, std::size_t n, std::size_t k,
              std::size_t m) {
  for (std::size_t r = 0; r < n; ++r) {
    float* orow = out + r * m;
    for (std::size_t i = 0; i < k; ++i) {
      const float av = a[r * k + i];
      const float* brow = b + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

// out += a * b^T   (a: n x k, b: m x k)
void gemm_bt_acc(const float* a, const float* b, float* out, std::size_t n, std::size_t k,
                 std::size_t m) {
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < m; ++j) {
      float s = 0.0f;
      for (std::size_t i = 0; i < k; ++i) s += a[r * k + i] * b[j * k + i];
      out[r * m + j] += s;
    }
  }
}

// out += a^T * b   (a: n x k, b: n x m) -> k x m
void gemm_at_acc(const float* a, const float* b, float* out, std::size_t n, std::size_t k,
                 std::size_t m) {
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < k; ++i) {
      const float av = a[r * k + i];
      float* orow = out + i * m;
      const float* brow = b + r * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

float gelu_value(float x) {
  return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0)));
}

float gelu_derivative(float x) {
  const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0)));
  const float pdf =
      std::exp(-0.5f * x * x) * static_cast<float>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw ShapeError("tape: variable does not belong to this tape");
  return nodes_[v.id];
}

void Tape::check_open(OpKind kind) const {
  if (spent_) {
    throw std::logic_error(std::string(op_name(kind)) +
                           ": tape already ran backward; clear() before recording");
  }
}

const Tensor& Tape::value(Var v) const { return node(v).value; }
const Tensor& Tape::grad(Var v) const { return node(v).grad; }

void Tape::clear() {
  nodes_.clear();
  spent_ = false;
}

Var Tape::constant(Tensor value) {
  check_open(OpKind::Leaf);
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  check_open(OpKind::Leaf);
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p, bool trainable) {
  check_open(OpKind::Leaf);
  Node n;
  n.value = p.value;
  n.needs_grad = trainable;
  n.param = trainable ? &p : nullptr;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  check_open(OpKind::MatMul);
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.cols() != B.rows()) shape_mismatch(OpKind::MatMul, A, B);
  Node n;
  n.op = OpKind::MatMul;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.value = Tensor::matrix(A.rows(), B.cols());
  gemm_acc(A.data(), B.data(), n.value.data(), A.rows(), A.cols(), B.cols());
  return push(std::move(n));
}

Var Tape::matmul_transposed(Var a, Var b) {
  check_open(OpKind::MatMulTransB);
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.cols() != B.cols()) shape_mismatch(OpKind::MatMulTransB, A, B);
  Node n;
  n.op = OpKind::MatMulTransB;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.value = Tensor::matrix(A.rows(), B.rows());
  gemm_bt_acc(A.data(), B.data(), n.value.data(), A.rows(), A.cols(), B.rows());
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  check_open(OpKind::Add);
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.rows() != B.rows() || A.cols() != B.cols()) shape_mismatch(OpKind::Add, A, B);
  Node n;
  n.op = OpKind::Add;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.value = Tensor::matrix(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) n.value[i] = A[i] + B[i];
  return push(std::move(n));
}

Var Tape::add_row_broadcast(Var x, Var row) {
  check_open(OpKind::AddRowBroadcast);
  const auto& X = node(x).value;
  const auto& R = node(row).value;
  if (R.size() != X.cols()) shape_mismatch(OpKind::AddRowBroadcast, X, R);
  Node n;
  n.op = OpKind::AddRowBroadcast;
  n.a = x.id;
  n.b = row.id;
  n.needs_grad = node(x).needs_grad || node(row).needs_grad;
  n.value = Tensor::matrix(X.rows(), X.cols());
  const std::size_t m = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < m; ++j) n.value[r * m + j] = X[r * m + j] + R[j];
  return push(std::move(n));
}

Var Tape::add_const(Var x, const Tensor& c) {
  check_open(OpKind::AddConst);
  const auto& X = node(x).value;
  if (X.size() != c.size()) shape_mismatch(OpKind::AddConst, X, c);
  Node n;
  n.op = OpKind::AddConst;
  n.a = x.id;
  n.needs_grad = node(x).needs_grad;
  n.value = Tensor::matrix(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) n.value[i] = X[i] + c[i];
  return push(std::move(n));
}

Var Tape::mul_const(Var x, const Tensor& c) {
  check_open(OpKind::MulConst);
  const auto& X = node(x).value;
  if (X.size() != c.size()) shape_mismatch(OpKind::MulConst, X, c);
  Node n;
  n.op = OpKind::MulConst;
  n.a = x.id;
  n.needs_grad = node(x).needs_grad;
  n.value = Tensor::matrix(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) n.value[i] = X[i] * c[i];
  n.cache.assign(c.values().begin(), c.values().end());
  return push(std::move(n));
}

Var Tape::scale(Var x, Var scalar) {
  check_open(OpKind::ScaleByVar);
  const auto& X = node(x).value;
  const auto& S = node(scalar).value;
  if (S.size() != 1) shape_mismatch(OpKind::ScaleByVar, X, S);
  Node n;
  n.op = OpKind::ScaleByVar;
  n.a = x.id;
  n.b = scalar.id;
  n.needs_grad = node(x).needs_grad || node(scalar).needs_grad;
  n.value = Tensor::matrix(X.rows(), X.cols());
  const float s = S[0];
  for (std::size_t i = 0; i < X.size(); ++i) n.value[i] = s * X[i];
  return push(std::move(n));
}

Var Tape::scale(Var x, float c) {
  check_open(OpKind::ScaleConst);
  const auto& X = node(x).value;
  Node n;
  n.op = OpKind::ScaleConst;
  n.a = x.id;
  n.scalar = c;
  n.needs_grad = node(x).needs_grad;
  n.value = Tensor::matrix(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) n.value[i] = c * X[i];
  return push(std::move(n));
}

Var Tape::softmax_rows(Var x) {
  check_open(OpKind::SoftmaxRows);
  const auto& X = node(x).value;
  Node n;
  n.op = OpKind::SoftmaxRows;
  n.a = x.id;
  n.needs_grad = node(x).needs_grad;
  n.value = Tensor::matrix(X.rows(), X.cols());
  const std::size_t m = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r) {
    const float* in = X.data() + r * m;
    float* out = n.value.data() + r * m;
    float mx = in[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, in[j]);
    float sum = 0.0f;
    for (std::size_t j = 0; j < m; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < m; ++j) out[j] /= sum;
  }
  return push(std::move(n));
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, float eps) {
  check_open(OpKind::LayerNorm);
  const auto& X = node(x).value;
  const auto& G = node(gamma).value;
  const auto& B = node(beta).value;
  const std::size_t m = X.cols();
  if (G.size() != m) shape_mismatch(OpKind::LayerNorm, X, G);
  if (B.size() != m) shape_mismatch(OpKind::LayerNorm, X, B);
  Node n;
  n.op = OpKind::LayerNorm;
  n.a = x.id;
  n.b = gamma.id;
  n.c = beta.id;
  n.needs_grad = node(x).needs_grad || node(gamma).needs_grad || node(beta).needs_grad;
  n.value = Tensor::matrix(X.rows(), m);
  // cache layout: normalized x (rows*m) followed by 1/std per row
  n.cache.resize(X.size() + X.rows());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    const float* in = X.data() + r * m;
    float mean = 0.0f;
    for (std::size_t j = 0; j < m; ++j) mean += in[j];
    mean /= static_cast<float>(m);
    float var = 0.0f;
    for (std::size_t j = 0; j < m; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<float>(m);
    const float rstd = 1.0f / std::sqrt(var + eps);
    n.cache[X.size() + r] = rstd;
    for (std::size_t j = 0; j < m; ++j) {
      const float xhat = (in[j] - mean) * rstd;
      n.cache[r * m + j] = xhat;
      n.value[r * m + j] = xhat * G[j] + B[j];
    }
  }
  return push(std::move(n));
}

Var Tape::gelu(Var x) {
  check_open(OpKind::Gelu);
  const auto& X = node(x).value;
  Node n;
  n.op = OpKind::Gelu;
  n.a = x.id;
  n.needs_grad = node(x).needs_grad;
  n.value = Tensor::matrix(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) n.value[i] = gelu_value(X[i]);
  return push(std::move(n));
}

Var Tape::relu(Var x) {
  check_open(OpKind::Relu);
  const auto& X = node(x).value;
  Node n;
  n.op = OpKind::Relu;
  n.a = x.id;
  n.needs_grad = node(x).needs_grad;
  n.value = Tensor::matrix(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) n.value[i] = X[i] > 0.0f ? X[i] : 0.0f;
  return push(std::move(n));
}

Var Tape::concat_cols(std::span<const Var> parts) {
  check_open(OpKind::ConcatCols);
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = node(parts[0]).value.rows();
  std::size_t total = 0;
  Node n;
  n.op = OpKind::ConcatCols;
  for (auto p : parts) {
    const auto& P = node(p).value;
    if (P.rows() != rows) shape_mismatch(OpKind::ConcatCols, node(parts[0]).value, P);
    total += P.cols();
    n.parts.push_back(p.id);
    n.needs_grad = n.needs_grad || node(p).needs_grad;
  }
  n.value = Tensor::matrix(rows, total);
  std::size_t off = 0;
  for (auto p : parts) {
    const auto& P = node(p).value;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < P.cols(); ++j) n.value[r * total + off + j] = P.at(r, j);
    off += P.cols();
  }
  return push(std::move(n));
}

Var Tape::slice_cols(Var x, std::size_t offset, std::size_t width) {
  check_open(OpKind::SliceCols);
  const auto& X = node(x).value;
  if (width == 0 || offset + width > X.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(offset) + ", " +
                     std::to_string(offset + width) + ") out of range for " +
                     shape_string(X.shape()));
  }
  Node n;
  n.op = OpKind::SliceCols;
  n.a = x.id;
  n.offset = offset;
  n.needs_grad = node(x).needs_grad;
  n.value = Tensor::matrix(X.rows(), width);
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < width; ++j) n.value[r * width + j] = X.at(r, offset + j);
  return push(std::move(n));
}

Var Tape::slice_rows(Var x, std::size_t offset, std::size_t count) {
  check_open(OpKind::SliceRows);
  const auto& X = node(x).value;
  if (count == 0 || offset + count > X.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(offset) + ", " +
                     std::to_string(offset + count) + ") out of range for " +
                     shape_string(X.shape()));
  }
  Node n;
  n.op = OpKind::SliceRows;
  n.a = x.id;
  n.offset = offset;
  n.needs_grad = node(x).needs_grad;
  n.value = Tensor::matrix(count, X.cols());
  std::copy_n(X.data() + offset * X.cols(), count * X.cols(), n.value.data());
  return push(std::move(n));
}

Var Tape::gather_rows(Var table, std::span<const std::int32_t> ids) {
  check_open(OpKind::GatherRows);
  const auto& T = node(table).value;
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= T.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(id) + " out of range for " +
                       shape_string(T.shape()));
    }
  }
  Node n;
  n.op = OpKind::GatherRows;
  n.a = table.id;
  n.ids.assign(ids.begin(), ids.end());
  n.needs_grad = node(table).needs_grad;
  const std::size_t m = T.cols();
  n.value = Tensor::matrix(ids.size(), m);
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(T.data() + static_cast<std::size_t>(ids[r]) * m, m, n.value.data() + r * m);
  return push(std::move(n));
}

Var Tape::mean_rows(Var x) {
  check_open(OpKind::MeanRows);
  const auto& X = node(x).value;
  Node n;
  n.op = OpKind::MeanRows;
  n.a = x.id;
  n.needs_grad = node(x).needs_grad;
  const std::size_t m = X.cols();
  n.value = Tensor::matrix(1, m);
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < m; ++j) n.value[j] += X[r * m + j];
  const float inv = 1.0f / static_cast<float>(X.rows());
  for (std::size_t j = 0; j < m; ++j) n.value[j] *= inv;
  return push(std::move(n));
}

Var Tape::cross_entropy(Var logits, std::size_t target) {
  check_open(OpKind::CrossEntropy);
  const auto& L = node(logits).value;
  if (L.rows() != 1) throw ShapeError("cross_entropy: logits must be a single row, got " +
                                      shape_string(L.shape()));
  if (target >= L.cols()) {
    throw ShapeError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                     shape_string(L.shape()));
  }
  Node n;
  n.op = OpKind::CrossEntropy;
  n.a = logits.id;
  n.offset = target;
  n.needs_grad = node(logits).needs_grad;
  const std::size_t m = L.cols();
  float mx = L[0];
  for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, L[j]);
  float sum = 0.0f;
  n.cache.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    n.cache[j] = std::exp(L[j] - mx);
    sum += n.cache[j];
  }
  for (std::size_t j = 0; j < m; ++j) n.cache[j] /= sum;
  n.value = Tensor::scalar(-(L[target] - mx - std::log(sum)));
  return push(std::move(n));
}

Var Tape::squared_error(Var prediction, float target) {
  check_open(OpKind::SquaredError);
  const auto& P = node(prediction).value;
  if (P.size() != 1) throw ShapeError("squared_error: prediction must be 1x1, got " +
                                      shape_string(P.shape()));
  Node n;
  n.op = OpKind::SquaredError;
  n.a = prediction.id;
  n.scalar = target;
  n.needs_grad = node(prediction).needs_grad;
  const float d = P[0] - target;
  n.value = Tensor::scalar(d * d);
  return push(std::move(n));
}

void Tape::backward(Var loss) {
  if (spent_) throw std::logic_error("backward: tape already ran backward");
  const auto& L = node(loss).value;
  if (L.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(L.shape()));
  }
  for (std::size_t i = 0; i <= loss.id; ++i) {
    auto& n = nodes_[i];
    if (n.needs_grad) n.grad = Tensor(n.value.shape(), 0.0f);
  }
  spent_ = true;
  if (!nodes_[loss.id].needs_grad) return;
  nodes_[loss.id].grad[0] = 1.0f;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.needs_grad) continue;
    if (n.op == OpKind::Leaf) {
      if (n.param != nullptr) {
        auto& pg = n.param->grad;
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
      continue;
    }
    backprop_node(n);
  }
}

void Tape::backprop_node(Node& n) {
  const Tensor& dy = n.grad;
  auto wants = [&](std::uint32_t id) { return id != UINT32_MAX && nodes_[id].needs_grad; };

  switch (n.op) {
    case OpKind::Leaf:
      break;
    case OpKind::MatMul: {
      auto& A = nodes_[n.a];
      auto& B = nodes_[n.b];
      const std::size_t rows = A.value.rows(), k = A.value.cols(), m = B.value.cols();
      if (wants(n.a)) gemm_bt_acc(dy.data(), B.value.data(), A.grad.data(), rows, m, k);
      if (wants(n.b)) gemm_at_acc(A.value.data(), dy.data(), B.grad.data(), rows, k, m);
      break;
    }
    case OpKind::MatMulTransB: {
      auto& A = nodes_[n.a];
      auto& B = nodes_[n.b];
      const std::size_t rows = A.value.rows(), k = A.value.cols(), m = B.value.rows();
      if (wants(n.a)) gemm_acc(dy.data(), B.value.data(), A.grad.data(), rows, m, k);
      if (wants(n.b)) gemm_at_acc(dy.data(), A.value.data(), B.grad.data(), rows, m, k);
      break;
    }
    case OpKind::Add: {
      if (wants(n.a)) {
        auto& g = nodes_[n.a].grad;
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
      }
      if (wants(n.b)) {
        auto& g = nodes_[n.b].grad;
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
      }
      break;
    }
    case OpKind::AddRowBroadcast: {
      const std::size_t m = dy.cols();
      if (wants(n.a)) {
        auto& g = nodes_[n.a].grad;
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
      }
      if (wants(n.b)) {
        auto& g = nodes_[n.b].grad;
        for (std::size_t r = 0; r < dy.rows(); ++r)
          for (std::size_t j = 0; j < m; ++j) g[j] += dy[r * m + j];
      }
      break;
    }
    case OpKind::AddConst: {
      auto& g = nodes_[n.a].grad;
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
      break;
    }
    case OpKind::MulConst: {
      auto& g = nodes_[n.a].grad;
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * n.cache[i];
      break;
    }
    case OpKind::ScaleByVar: {
      const auto& X = nodes_[n.a].value;
      const float s = nodes_[n.b].value[0];
      if (wants(n.a)) {
        auto& g = nodes_[n.a].grad;
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += s * dy[i];
      }
      if (wants(n.b)) {
        // Double accumulator: this reduction is the head-gate gradient and
        // cancels heavily, so float summation loses several digits.
        double acc = 0.0;
        for (std::size_t i = 0; i < dy.size(); ++i) acc += static_cast<double>(X[i]) * dy[i];
        nodes_[n.b].grad[0] += static_cast<float>(acc);
      }
      break;
    }
    case OpKind::ScaleConst: {
      auto& g = nodes_[n.a].grad;
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += n.scalar * dy[i];
      break;
    }
    case OpKind::SoftmaxRows: {
      auto& g = nodes_[n.a].grad;
      const std::size_t m = dy.cols();
      for (std::size_t r = 0; r < dy.rows(); ++r) {
        const float* y = n.value.data() + r * m;
        const float* d = dy.data() + r * m;
        float dot = 0.0f;
        for (std::size_t j = 0; j < m; ++j) dot += d[j] * y[j];
        for (std::size_t j = 0; j < m; ++j) g[r * m + j] += y[j] * (d[j] - dot);
      }
      break;
    }
    case OpKind::LayerNorm: {
      const std::size_t m = dy.cols();
      const std::size_t rows = dy.rows();
      const auto& G = nodes_[n.b].value;
      const float* xhat = n.cache.data();
      const float* rstd = n.cache.data() + rows * m;
      if (wants(n.b)) {
        auto& gg = nodes_[n.b].grad;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < m; ++j) gg[j] += dy[r * m + j] * xhat[r * m + j];
      }
      if (wants(n.c)) {
        auto& gb = nodes_[n.c].grad;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < m; ++j) gb[j] += dy[r * m + j];
      }
      if (wants(n.a)) {
        auto& gx = nodes_[n.a].grad;
        const float inv_m = 1.0f / static_cast<float>(m);
        for (std::size_t r = 0; r < rows; ++r) {
          float sum_d = 0.0f, sum_dx = 0.0f;
          for (std::size_t j = 0; j < m; ++j) {
            const float dxh = dy[r * m + j] * G[j];
            sum_d += dxh;
            sum_dx += dxh * xhat[r * m + j];
          }
          for (std::size_t j = 0; j < m; ++j) {
            const float dxh = dy[r * m + j] * G[j];
            gx[r * m + j] +=
                rstd[r] * (dxh - inv_m * sum_d - xhat[r * m + j] * inv_m * sum_dx);
          }
        }
      }
      break;
    }
    case OpKind::Gelu: {
      const auto& X = nodes_[n.a].value;
      auto& g = nodes_[n.a].grad;
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * gelu_derivative(X[i]);
      break;
    }
    case OpKind::Relu: {
      const auto& X = nodes_[n.a].value;
      auto& g = nodes_[n.a].grad;
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += X[i] > 0.0f ? dy[i] : 0.0f;
      break;
    }
    case OpKind::ConcatCols: {
      const std::size_t total = dy.cols();
      std::size_t off = 0;
      for (auto pid : n.parts) {
        auto& P = nodes_[pid];
        const std::size_t w = P.value.cols();
        if (P.needs_grad) {
          for (std::size_t r = 0; r < dy.rows(); ++r)
            for (std::size_t j = 0; j < w; ++j) P.grad[r * w + j] += dy[r * total + off + j];
        }
        off += w;
      }
      break;
    }
    case OpKind::SliceCols: {
      auto& g = nodes_[n.a].grad;
      const std::size_t full = g.cols(), w = dy.cols();
      for (std::size_t r = 0; r < dy.rows(); ++r)
        for (std::size_t j = 0; j < w; ++j) g[r * full + n.offset + j] += dy[r * w + j];
      break;
    }
    case OpKind::SliceRows: {
      auto& g = nodes_[n.a].grad;
      const std::size_t m = dy.cols();
      for (std::size_t i = 0; i < dy.size(); ++i) g[n.offset * m + i] += dy[i];
      break;
    }
    case OpKind::GatherRows: {
      auto& g = nodes_[n.a].grad;
      const std::size_t m = dy.cols();
      for (std::size_t r = 0; r < n.ids.size(); ++r) {
        float* row = g.data() + static_cast<std::size_t>(n.ids[r]) * m;
        for (std::size_t j = 0; j < m; ++j) row[j] += dy[r * m + j];
      }
      break;
    }
    case OpKind::MeanRows: {
      auto& g = nodes_[n.a].grad;
      const std::size_t m = dy.cols();
      const std::size_t rows = g.rows();
      const float inv = 1.0f / static_cast<float>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) g[r * m + j] += dy[j] * inv;
      break;
    }
    case OpKind::CrossEntropy: {
      auto& g = nodes_[n.a].grad;
      const float d = dy[0];
      for (std::size_t j = 0; j < n.cache.size(); ++j) {
        const float onehot = j == n.offset ? 1.0f : 0.0f;
        g[j] += d * (n.cache[j] - onehot);
      }
      break;
    }
    case OpKind::SquaredError: {
      auto& g = nodes_[n.a].grad;
      g[0] += dy[0] * 2.0f * (nodes_[n.a].value[0] - n.scalar);
      break;
    }
  }
}

}  // namespace headlab
