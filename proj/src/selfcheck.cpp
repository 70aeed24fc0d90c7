#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <ostream>
#include <random>

#include "headlab/checkpoint.hpp"
#include "headlab/experiment.hpp"
#include "headlab/format.hpp"

namespace headlab {

namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.model_dim = 16;
  c.key_dim = 4;
  c.value_dim = 4;
  c.ff_dim = 32;
  c.vocab_size = 24;
  c.max_seq_len = 12;
  c.dropout = 0.1f;
  return c;
}

Example random_example(std::mt19937_64& rng, std::size_t vocab, std::size_t n_class) {
  Example e;
  const std::size_t n = 2 + rng() % 7;
  for (std::size_t t = 0; t < n; ++t) {
    e.input.ids.push_back(t == 0 ? Vocabulary::kCls : static_cast<std::int32_t>(4 + rng() % (vocab - 4)));
    e.input.segments.push_back(0);
  }
  e.label = static_cast<double>(rng() % n_class);
  return e;
}

double probe_loss(const Model& m, const Example& ex, std::size_t head, float gate) {
  Tape tape;
  GateVector ones(m.config().n_layers, m.config().n_heads);
  auto g = m.bind_gates(tape, ones, false);
  g[head] = tape.constant(Tensor::scalar(gate));
  ForwardOptions opts;
  opts.allow_gate_probe = true;
  return tape.value(m.loss(tape, m.forward(tape, ex.input, 0, g, opts), 0, ex.label))[0];
}

// Central differences in float arithmetic, so the tolerance is looser than the
// double-precision oracle used by the unit tests.
std::string check_gate_gradients(std::size_t seeds) {
  const float h = 5e-3f;
  for (std::size_t s = 1; s <= seeds; ++s) {
    std::mt19937_64 rng(s);
    Model m(small_config(), s);
    m.add_task("t", TaskKind::Classification, 3, Pooling::First, s);
    const auto ex = random_example(rng, 24, 3);
    const auto grads = gate_gradients(m, 0, ex, GateVector(2, 4));
    for (std::size_t k = 0; k < grads.size(); ++k) {
      const double fd = (probe_loss(m, ex, k, 1.0f + h) - probe_loss(m, ex, k, 1.0f - h)) / (2.0 * h);
      const double err = std::abs(grads[k] - fd) / (std::abs(fd) + 1e-3);
      if (err > 2e-2) return "seed " + std::to_string(s) + " head " + std::to_string(k) + " error " + sig9(err);
    }
  }
  return {};
}

std::string check_inner_product(std::size_t seeds) {
  for (std::size_t s = 1; s <= seeds; ++s) {
    std::mt19937_64 rng(100 + s);
    Model m(small_config(), 100 + s);
    m.add_task("t", TaskKind::Classification, 2, Pooling::Mean, s);
    const auto ex = random_example(rng, 24, 2);
    Tape tape;
    auto g = m.bind_gates(tape, m.gates(), true);
    ForwardTrace trace;
    ForwardOptions opts;
    opts.trace = &trace;
    tape.backward(m.loss(tape, m.forward(tape, ex.input, 0, g, opts), 0, ex.label));
    for (std::size_t k = 0; k < g.size(); ++k) {
      const Tensor& a = tape.value(trace.head_outputs[k]);
      const Tensor& up = tape.grad(trace.gated_outputs[k]);
      double inner = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) inner += static_cast<double>(a[i]) * up[i];
      const double got = tape.grad(g[k])[0];
      if (std::abs(inner - got) > 1e-5 * std::max(std::abs(inner), 1e-20))
        return "seed " + std::to_string(s) + " head " + std::to_string(k);
    }
  }
  return {};
}

std::string check_gate_pruning(std::size_t trials) {
  std::mt19937_64 rng(7);
  for (std::size_t t = 0; t < trials; ++t) {
    Model m(small_config(), 200 + t);
    m.add_task("t", TaskKind::Classification, 3, Pooling::Mean, t);
    Model zeroed = m;
    GateVector gates(2, 4);
    for (std::size_t k = 0; k < gates.size(); ++k)
      if (rng() % 2) {
        gates.set(gates.head_at(k), 0.0f);
        zeroed.zero_output_rows(gates.head_at(k));
      }
    const auto ex = random_example(rng, 24, 3);
    const Tensor a = m.output(ex.input, 0, gates), b = zeroed.output(ex.input, 0, GateVector(2, 4));
    for (std::size_t i = 0; i < a.size(); ++i)
      if (std::abs(a[i] - b[i]) > 1e-6) return "trial " + std::to_string(t);
  }
  return {};
}

std::string check_checkpoint_round_trip() {
  const fs::path dir = fs::temp_directory_path() / ("headlab_selfcheck_" + std::to_string(std::random_device{}()));
  struct Cleanup {
    fs::path p;
    ~Cleanup() { std::error_code ec; fs::remove_all(p, ec); }
  } cleanup{dir};
  Model m(small_config(), 3);
  m.add_task("a", TaskKind::Classification, 2, Pooling::First, 4);
  m.add_task("b", TaskKind::Regression, 1, Pooling::Mean, 5);
  save_checkpoint(dir / "one", m);
  const auto loaded = load_checkpoint(dir / "one");
  save_checkpoint(dir / "two", loaded.model);
  if (file_digest(dir / "one" / "params.bin") != file_digest(dir / "two" / "params.bin")) return "blobs differ";
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  if (slurp(dir / "one" / "manifest.json") != slurp(dir / "two" / "manifest.json")) return "manifests differ";
  return {};
}

std::string check_iat_degeneracy() {
  std::mt19937_64 rng(11);
  ModelConfig c = small_config();
  std::vector<TrainTask> tasks(2);
  for (std::size_t t = 0; t < 2; ++t) {
    tasks[t].task = t;
    for (int i = 0; i < 24; ++i) tasks[t].examples.push_back(random_example(rng, 24, 2));
  }
  auto train = [&](double delta, double alpha) {
    Model m(c, 9);
    m.add_task("a", TaskKind::Classification, 2, Pooling::First, 1);
    m.add_task("b", TaskKind::Classification, 2, Pooling::First, 2);
    TrainSchedule s;
    s.epochs = 2;
    s.batch_size = 8;
    s.seed = 5;
    s.iat_fraction = delta;
    s.iat_alpha = alpha;
    MultitaskTrainer tr(m, tasks, s);
    tr.run();
    std::vector<float> flat;
    for (const auto& p : m.params()) flat.insert(flat.end(), p.value.values().begin(), p.value.values().end());
    return flat;
  };
  const auto plain = train(0.0, 0.3);
  if (train(0.5, 1.0) != plain) return "alpha = 1 diverges from plain training";
  if (train(0.5, 0.3) == plain) return "IAT with alpha < 1 had no effect";
  return {};
}

std::string check_sampling() {
  const std::vector<std::size_t> sizes{100, 400};
  for (auto mode : {SamplingMode::Proportional, SamplingMode::Annealed})
    for (std::size_t e = 1; e <= 5; ++e) {
      const auto p = sampling_probs(sizes, mode, e, 5);
      if (std::abs(p[0] + p[1] - 1.0) > 1e-12) return "probabilities do not sum to 1";
    }
  const auto end = sampling_probs(sizes, SamplingMode::Annealed, 5, 5);
  const double expect = std::pow(100.0, 0.2) / (std::pow(100.0, 0.2) + std::pow(400.0, 0.2));
  if (std::abs(end[0] - expect) > 1e-12) return "annealed endpoint";
  return {};
}

}  // namespace

bool run_selfcheck(std::ostream& out, std::size_t seeds) {
  const std::vector<std::pair<std::string, std::function<std::string()>>> checks{
      {"gate gradient vs finite differences", [&] { return check_gate_gradients(seeds); }},
      {"gate gradient equals head-output inner product", [&] { return check_inner_product(seeds); }},
      {"closed gate equals zeroed output rows", [] { return check_gate_pruning(20); }},
      {"checkpoint save-load-save is byte identical", check_checkpoint_round_trip},
      {"IAT with alpha = 1 equals plain training", check_iat_degeneracy},
      {"sampling probabilities", check_sampling},
  };
  bool ok = true;
  for (const auto& [name, run] : checks) {
    std::string problem;
    try {
      problem = run();
    } catch (const std::exception& e) {
      problem = std::string("threw: ") + e.what();
    }
    out << (problem.empty() ? "PASS " : "FAIL ") << name;
    if (!problem.empty()) out << " (" << problem << ")";
    out << '\n';
    ok = ok && problem.empty();
  }
  return ok;
}

}  // namespace headlab
