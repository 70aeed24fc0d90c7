#include "headlab/model.hpp"

#include <cmath>
#include <numeric>

#include "headlab/error.hpp"

namespace headlab {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v < 1) throw ConfigError(std::string("model.") + field + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(model_dim, "model_dim");
  positive(key_dim, "key_dim");
  positive(value_dim, "value_dim");
  positive(ff_dim, "ff_dim");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  positive(n_segments, "n_segments");
  if (n_heads * value_dim != model_dim) {
    throw ConfigError("model.n_heads * model.value_dim must equal model.model_dim (" +
                      std::to_string(n_heads) + " * " + std::to_string(value_dim) +
                      " != " + std::to_string(model_dim) + ")");
  }
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("model.dropout must lie in [0, 1)");
}

GateVector::GateVector(std::size_t n_layers, std::size_t n_heads, float fill)
    : n_layers_(n_layers), n_heads_(n_heads), values_(n_layers * n_heads, fill) {}

std::size_t GateVector::index(HeadId h) const {
  if (h.layer >= n_layers_ || h.head >= n_heads_) {
    throw ShapeError("head (" + std::to_string(h.layer) + ", " + std::to_string(h.head) +
                     ") out of range for " + std::to_string(n_layers_) + " layers x " +
                     std::to_string(n_heads_) + " heads");
  }
  return h.layer * n_heads_ + h.head;
}

void GateVector::set(HeadId h, float value) {
  if (!(value >= 0.0f && value <= 1.0f)) {
    throw ShapeError("gate value " + std::to_string(value) + " outside [0, 1]");
  }
  values_[index(h)] = value;
}

void GateVector::set_probe(HeadId h, float value) {
  if (!(value >= 0.0f && value <= 1.0f + kMaxGateProbe)) {
    throw ShapeError("probe gate value " + std::to_string(value) + " outside [0, 1 + probe]");
  }
  values_[index(h)] = value;
}

void GateVector::fill(float value) {
  if (!(value >= 0.0f && value <= 1.0f)) {
    throw ShapeError("gate value " + std::to_string(value) + " outside [0, 1]");
  }
  std::fill(values_.begin(), values_.end(), value);
}

bool GateVector::within_unit_interval() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](float v) { return v >= 0.0f && v <= 1.0f; });
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const auto d = config_.model_dim;
  const auto qk = config_.n_heads * config_.key_dim;
  const auto vv = config_.n_heads * config_.value_dim;
  Rng rng(seed);

  tok_emb_ = add_param("embeddings.token", {config_.vocab_size, d});
  pos_emb_ = add_param("embeddings.position", {config_.max_seq_len, d});
  seg_emb_ = add_param("embeddings.segment", {config_.n_segments, d});
  emb_gamma_ = add_param("embeddings.norm.gamma", {d});
  emb_beta_ = add_param("embeddings.norm.beta", {d});
  init_normal(tok_emb_, 1.0f, rng);
  init_normal(pos_emb_, 1.0f, rng);
  init_normal(seg_emb_, 1.0f, rng);
  params_[emb_gamma_].value.fill(1.0f);

  auto xavier = [](std::size_t fan_in, std::size_t fan_out) {
    return static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
  };
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerParams lp{};
    lp.wq = add_param(p + "attention.query.weight", {d, qk});
    lp.bq = add_param(p + "attention.query.bias", {qk});
    lp.wk = add_param(p + "attention.key.weight", {d, qk});
    lp.bk = add_param(p + "attention.key.bias", {qk});
    lp.wv = add_param(p + "attention.value.weight", {d, vv});
    lp.bv = add_param(p + "attention.value.bias", {vv});
    lp.wo = add_param(p + "attention.output.weight", {vv, d});
    lp.attn_gamma = add_param(p + "attention.norm.gamma", {d});
    lp.attn_beta = add_param(p + "attention.norm.beta", {d});
    lp.ff_in_w = add_param(p + "ffn.in.weight", {d, config_.ff_dim});
    lp.ff_in_b = add_param(p + "ffn.in.bias", {config_.ff_dim});
    lp.ff_out_w = add_param(p + "ffn.out.weight", {config_.ff_dim, d});
    lp.ff_out_b = add_param(p + "ffn.out.bias", {d});
    lp.ff_gamma = add_param(p + "ffn.norm.gamma", {d});
    lp.ff_beta = add_param(p + "ffn.norm.beta", {d});
    init_normal(lp.wq, xavier(d, config_.key_dim), rng);
    init_normal(lp.wk, xavier(d, config_.key_dim), rng);
    init_normal(lp.wv, xavier(d, config_.value_dim), rng);
    init_normal(lp.wo, xavier(vv, d), rng);
    init_normal(lp.ff_in_w, xavier(d, config_.ff_dim), rng);
    init_normal(lp.ff_out_w, xavier(config_.ff_dim, d), rng);
    params_[lp.attn_gamma].value.fill(1.0f);
    params_[lp.ff_gamma].value.fill(1.0f);
    layers_.push_back(lp);
  }
  gates_ = GateVector(config_.n_layers, config_.n_heads, 1.0f);
}

std::size_t Model::add_param(std::string name, std::vector<std::size_t> shape) {
  params_.emplace_back(std::move(name), Tensor(std::move(shape), 0.0f));
  return params_.size() - 1;
}

void Model::init_normal(std::size_t index, float stddev, Rng& rng) {
  for (auto& v : params_[index].value.values()) v = rng.normal(0.0f, stddev);
}

std::size_t Model::add_task(const std::string& name, TaskKind kind, std::size_t n_class,
                            Pooling pooling, std::uint64_t seed) {
  if (find_task(name)) throw ConfigError("task '" + name + "' registered twice");
  if (kind == TaskKind::Classification && n_class < 2) {
    throw ConfigError("task '" + name + "': classification needs n_class >= 2");
  }
  TaskHead head;
  head.name = name;
  head.kind = kind;
  head.n_class = kind == TaskKind::Regression ? 1 : n_class;
  head.pooling = pooling;
  const auto width = head.output_width();
  head.weight_index = add_param("tasks." + name + ".weight", {config_.model_dim, width});
  head.bias_index = add_param("tasks." + name + ".bias", {width});
  Rng rng(seed);
  init_normal(head.weight_index,
              static_cast<float>(std::sqrt(2.0 / static_cast<double>(config_.model_dim + width))),
              rng);
  tasks_.push_back(head);
  return tasks_.size() - 1;
}

const TaskHead& Model::task(std::size_t i) const {
  if (i >= tasks_.size()) {
    throw ShapeError("unknown task index " + std::to_string(i) + " (" +
                     std::to_string(tasks_.size()) + " registered)");
  }
  return tasks_[i];
}

std::optional<std::size_t> Model::find_task(const std::string& name) const {
  for (std::size_t i = 0; i < tasks_.size(); ++i)
    if (tasks_[i].name == name) return i;
  return std::nullopt;
}

std::optional<std::size_t> Model::find_param(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return std::nullopt;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::size_t Model::expected_parameter_count() const {
  const auto& c = config_;
  const std::size_t d = c.model_dim, qk = c.n_heads * c.key_dim, vv = c.n_heads * c.value_dim;
  std::size_t n = c.vocab_size * d + c.max_seq_len * d + c.n_segments * d + 2 * d;
  const std::size_t per_layer = 2 * (d * qk + qk) + (d * vv + vv) + vv * d + 2 * d +
                                (d * c.ff_dim + c.ff_dim) + (c.ff_dim * d + d) + 2 * d;
  n += c.n_layers * per_layer;
  for (const auto& t : tasks_) n += d * t.output_width() + t.output_width();
  return n;
}

std::size_t Model::parameter_count() const {
  return std::accumulate(params_.begin(), params_.end(), std::size_t{0},
                         [](std::size_t acc, const Parameter& p) { return acc + p.value.size(); });
}

std::vector<Var> Model::bind_gates(Tape& tape, const GateVector& gates, bool differentiable) const {
  if (gates.n_layers() != config_.n_layers || gates.n_heads() != config_.n_heads) {
    throw ShapeError("gate vector shape does not match the model");
  }
  std::vector<Var> out;
  out.reserve(gates.size());
  for (float v : gates.values()) {
    out.push_back(differentiable ? tape.variable(Tensor::scalar(v)) : tape.constant(Tensor::scalar(v)));
  }
  return out;
}

std::vector<Var> Model::bind_constants(Tape& tape) const {
  std::vector<Var> p;
  p.reserve(params_.size());
  for (const auto& param : params_) p.push_back(tape.constant(param.value));
  return p;
}

void Model::check_gates(std::span<const Var> gates, const Tape& tape, bool allow_probe) const {
  if (gates.size() != config_.head_count()) {
    throw ShapeError("expected " + std::to_string(config_.head_count()) + " gates, got " +
                     std::to_string(gates.size()));
  }
  const float hi = allow_probe ? 1.0f + kMaxGateProbe : 1.0f;
  for (std::size_t i = 0; i < gates.size(); ++i) {
    const float v = tape.value(gates[i])[0];
    if (!(v >= 0.0f && v <= hi)) {
      throw ShapeError("gate " + std::to_string(i) + " = " + std::to_string(v) +
                       " outside [0, 1]");
    }
  }
}

Var Model::forward(Tape& tape, const EncodedInput& input, std::size_t task,
                   std::span<const Var> gates, const ForwardOptions& options) const {
  const auto p = bind_constants(tape);
  return run(tape, p, input, task, gates, options);
}

Var Model::forward_trainable(Tape& tape, const EncodedInput& input, std::size_t task,
                             std::span<const Var> gates, const ForwardOptions& options) {
  std::vector<Var> p;
  p.reserve(params_.size());
  for (auto& param : params_) p.push_back(tape.parameter(param));
  return run(tape, p, input, task, gates, options);
}

Var Model::dropout(Tape& tape, Var x, const ForwardOptions& options) const {
  if (!options.training || config_.dropout <= 0.0f) return x;
  if (options.dropout_rng == nullptr) throw std::logic_error("training forward needs a dropout rng");
  const auto& v = tape.value(x);
  Tensor mask(v.shape(), 0.0f);
  const float keep = 1.0f - config_.dropout;
  for (auto& m : mask.values()) m = options.dropout_rng->uniform_float() < keep ? 1.0f / keep : 0.0f;
  return tape.mul_const(x, mask);
}

Var Model::attention(Tape& tape, std::size_t head, Var q_all, Var k_all, Var v_all) const {
  const auto dk = config_.key_dim, dv = config_.value_dim;
  Var q = tape.slice_cols(q_all, head * dk, dk);
  Var k = tape.slice_cols(k_all, head * dk, dk);
  Var v = tape.slice_cols(v_all, head * dv, dv);
  Var scores = tape.scale(tape.matmul_transposed(q, k), 1.0f / std::sqrt(static_cast<float>(dk)));
  if (config_.causal) {
    const auto n = tape.value(scores).rows();
    Tensor mask = Tensor::matrix(n, n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = r + 1; c < n; ++c) mask.at(r, c) = -1e9f;
    scores = tape.add_const(scores, mask);
  }
  return tape.matmul(tape.softmax_rows(scores), v);
}

Var Model::mha(Tape& tape, std::span<const Var> p, Var x, std::size_t layer,
               std::span<const Var> gates, ForwardTrace* trace) const {
  const auto& lp = layers_[layer];
  if (tape.value(x).cols() != config_.model_dim) {
    throw ShapeError("attention input has " + std::to_string(tape.value(x).cols()) +
                     " columns, model_dim is " + std::to_string(config_.model_dim));
  }
  Var q_all = tape.add_row_broadcast(tape.matmul(x, p[lp.wq]), p[lp.bq]);
  Var k_all = tape.add_row_broadcast(tape.matmul(x, p[lp.wk]), p[lp.bk]);
  Var v_all = tape.add_row_broadcast(tape.matmul(x, p[lp.wv]), p[lp.bv]);
  std::vector<Var> gated;
  gated.reserve(config_.n_heads);
  for (std::size_t h = 0; h < config_.n_heads; ++h) {
    Var a = attention(tape, h, q_all, k_all, v_all);
    Var g = tape.scale(a, gates[layer * config_.n_heads + h]);
    if (trace) {
      trace->head_outputs.push_back(a);
      trace->gated_outputs.push_back(g);
    }
    gated.push_back(g);
  }
  Var out = tape.matmul(tape.concat_cols(gated), p[lp.wo]);
  if (trace) trace->mha_outputs.push_back(out);
  return out;
}

Var Model::run(Tape& tape, std::span<const Var> p, const EncodedInput& input, std::size_t task,
               std::span<const Var> gates, const ForwardOptions& options) const {
  const auto& th = this->task(task);
  check_gates(gates, tape, options.allow_gate_probe);
  const std::size_t n = input.ids.size();
  if (n == 0) throw ShapeError("empty input sequence");
  if (n > config_.max_seq_len) {
    throw ShapeError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  if (input.segments.size() != n) throw ShapeError("segment ids must match token ids in length");
  for (auto id : input.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw ShapeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(config_.vocab_size));
    }
  }
  std::vector<std::int32_t> positions(n);
  std::iota(positions.begin(), positions.end(), 0);

  Var x = tape.add(tape.add(tape.gather_rows(p[tok_emb_], input.ids),
                            tape.gather_rows(p[pos_emb_], positions)),
                   tape.gather_rows(p[seg_emb_], input.segments));
  x = dropout(tape, tape.layer_norm(x, p[emb_gamma_], p[emb_beta_]), options);

  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const auto& lp = layers_[l];
    Var a = dropout(tape, mha(tape, p, x, l, gates, options.trace), options);
    x = tape.layer_norm(tape.add(x, a), p[lp.attn_gamma], p[lp.attn_beta]);
    Var h = tape.add_row_broadcast(tape.matmul(x, p[lp.ff_in_w]), p[lp.ff_in_b]);
    h = config_.activation == Activation::Gelu ? tape.gelu(h) : tape.relu(h);
    h = tape.add_row_broadcast(tape.matmul(h, p[lp.ff_out_w]), p[lp.ff_out_b]);
    h = dropout(tape, h, options);
    x = tape.layer_norm(tape.add(x, h), p[lp.ff_gamma], p[lp.ff_beta]);
    if (options.trace) options.trace->layer_outputs.push_back(x);
  }
  Var pooled = th.pooling == Pooling::First ? tape.slice_rows(x, 0, 1) : tape.mean_rows(x);
  return tape.add_row_broadcast(tape.matmul(pooled, p[th.weight_index]), p[th.bias_index]);
}

Var Model::loss(Tape& tape, Var output, std::size_t task, double label) const {
  const auto& th = this->task(task);
  if (th.kind == TaskKind::Regression) return tape.squared_error(output, static_cast<float>(label));
  if (label < 0 || label >= static_cast<double>(th.n_class) || label != std::floor(label)) {
    throw ShapeError("label " + std::to_string(label) + " invalid for task '" + th.name + "'");
  }
  return tape.cross_entropy(output, static_cast<std::size_t>(label));
}

Tensor Model::output(const EncodedInput& input, std::size_t task, const GateVector& gates) const {
  Tape tape;
  auto g = bind_gates(tape, gates, false);
  return tape.value(forward(tape, input, task, g));
}

double Model::predict(const EncodedInput& input, std::size_t task, const GateVector& gates) const {
  const Tensor out = output(input, task, gates);
  if (this->task(task).kind == TaskKind::Regression) return out[0];
  std::size_t best = 0;
  for (std::size_t j = 1; j < out.size(); ++j)
    if (out[j] > out[best]) best = j;
  return static_cast<double>(best);
}

Tensor Model::attention_head(const Tensor& x, HeadId head) const {
  if (head.layer >= config_.n_layers || head.head >= config_.n_heads) {
    throw ShapeError("attention_head: head out of range");
  }
  if (x.cols() != config_.model_dim) {
    throw ShapeError("attention_head: input has " + std::to_string(x.cols()) +
                     " columns, model_dim is " + std::to_string(config_.model_dim));
  }
  Tape tape;
  const auto p = bind_constants(tape);
  const auto& lp = layers_[head.layer];
  Var xv = tape.constant(x);
  Var q_all = tape.add_row_broadcast(tape.matmul(xv, p[lp.wq]), p[lp.bq]);
  Var k_all = tape.add_row_broadcast(tape.matmul(xv, p[lp.wk]), p[lp.bk]);
  Var v_all = tape.add_row_broadcast(tape.matmul(xv, p[lp.wv]), p[lp.bv]);
  return tape.value(attention(tape, head.head, q_all, k_all, v_all));
}

Tensor Model::mha_forward(const Tensor& x, std::size_t layer, const GateVector& gates) const {
  if (layer >= config_.n_layers) throw ShapeError("mha_forward: layer out of range");
  Tape tape;
  const auto p = bind_constants(tape);
  auto g = bind_gates(tape, gates, false);
  check_gates(g, tape, false);
  return tape.value(mha(tape, p, tape.constant(x), layer, g, nullptr));
}

HeadCapture Model::capture_head_outputs(const EncodedInput& input, std::size_t task,
                                        Pooling pooling) const {
  Tape tape;
  ForwardTrace trace;
  auto g = bind_gates(tape, gates_, false);
  ForwardOptions opts;
  opts.trace = &trace;
  forward(tape, input, task, g, opts);
  HeadCapture cap;
  for (auto v : trace.head_outputs) cap.head_outputs.push_back(tape.value(v));
  for (auto v : trace.layer_outputs) {
    Var pooled = pooling == Pooling::First ? tape.slice_rows(v, 0, 1) : tape.mean_rows(v);
    cap.pooled.push_back(tape.value(pooled));
  }
  return cap;
}

std::vector<HeadSlice> Model::head_slices(HeadId head) const {
  if (head.layer >= config_.n_layers || head.head >= config_.n_heads) {
    throw ShapeError("head_slices: head out of range");
  }
  const auto& lp = layers_[head.layer];
  const auto dk = config_.key_dim, dv = config_.value_dim;
  using A = HeadSlice::Axis;
  return {
      {lp.wq, A::Columns, head.head * dk, dk}, {lp.bq, A::Columns, head.head * dk, dk},
      {lp.wk, A::Columns, head.head * dk, dk}, {lp.bk, A::Columns, head.head * dk, dk},
      {lp.wv, A::Columns, head.head * dv, dv}, {lp.bv, A::Columns, head.head * dv, dv},
      {lp.wo, A::Rows, head.head * dv, dv},
  };
}

std::vector<ElementMask> Model::update_masks(std::span<const std::uint8_t> tunable) const {
  if (tunable.size() != config_.head_count()) {
    throw ShapeError("update mask needs one entry per head");
  }
  std::vector<ElementMask> masks(params_.size());
  for (std::size_t flat = 0; flat < tunable.size(); ++flat) {
    if (tunable[flat]) continue;
    for (const auto& s : head_slices(gates_.head_at(flat))) {
      const auto& t = params_[s.param_index].value;
      auto& m = masks[s.param_index];
      if (m.empty()) m.assign(t.size(), 1);
      const std::size_t rows = t.rows(), cols = t.cols();
      if (s.axis == HeadSlice::Axis::Columns) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = s.begin; c < s.begin + s.width; ++c) m[r * cols + c] = 0;
      } else {
        for (std::size_t r = s.begin; r < s.begin + s.width; ++r)
          for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] = 0;
      }
    }
  }
  return masks;
}

void Model::zero_output_rows(HeadId head) {
  const auto& lp = layers_.at(head.layer);
  auto& wo = params_[lp.wo].value;
  const auto dv = config_.value_dim;
  for (std::size_t r = head.head * dv; r < (head.head + 1) * dv; ++r)
    for (std::size_t c = 0; c < wo.cols(); ++c) wo.at(r, c) = 0.0f;
}

}  // namespace headlab
