#include "headlab/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "headlab/error.hpp"
#include "headlab/rng.hpp"

namespace headlab {

std::vector<double> gate_gradients(const Model& model, std::size_t task, const Example& example,
                                   const GateVector& gates, double loss_scale) {
  Tape tape;
  auto g = model.bind_gates(tape, gates, true);
  ForwardOptions opts;
  opts.allow_gate_probe = true;
  Var out = model.forward(tape, example.input, task, g, opts);
  Var loss = model.loss(tape, out, task, example.label);
  if (loss_scale != 1.0) loss = tape.scale(loss, static_cast<float>(loss_scale));
  tape.backward(loss);
  std::vector<double> grads(g.size());
  for (std::size_t h = 0; h < g.size(); ++h) grads[h] = tape.grad(g[h])[0];
  return grads;
}

ImportanceRow head_importance(const Model& model, std::size_t task, std::span<const Example> samples,
                              const ImportanceOptions& options) {
  const auto& th = model.task(task);
  if (samples.empty()) throw DataError("importance: no samples for task '" + th.name + "'");
  if (options.batch_size == 0 || options.max_batches == 0) {
    throw ConfigError("importance: batch_size and max_batches must be >= 1");
  }
  const auto& c = model.config();
  const std::size_t used = std::min(samples.size(), options.batch_size * options.max_batches);
  const GateVector ones(c.n_layers, c.n_heads, 1.0f);

  ImportanceRow row;
  row.task = th.name;
  row.scores.assign(c.head_count(), 0.0);
  for (std::size_t i = 0; i < used; ++i) {
    const auto grads = gate_gradients(model, task, samples[i], ones, options.loss_scale);
    for (std::size_t h = 0; h < grads.size(); ++h) row.scores[h] += std::abs(grads[h]);
  }
  for (auto& s : row.scores) s /= static_cast<double>(used);
  row.n_samples = used;
  row.n_batches = (used + options.batch_size - 1) / options.batch_size;

  if (options.normalize_per_layer) {
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      auto first = row.scores.begin() + static_cast<std::ptrdiff_t>(l * c.n_heads);
      auto last = first + static_cast<std::ptrdiff_t>(c.n_heads);
      const double norm = std::sqrt(std::inner_product(first, last, first, 0.0));
      if (norm > 0.0) std::for_each(first, last, [norm](double& s) { s /= norm; });
    }
  }
  return row;
}

void write_importance_csv(std::ostream& out, const ImportanceMatrix& m) {
  out << "task,layer,head,score,n_samples\n";
  char buf[64];
  for (const auto& row : m.rows) {
    for (std::size_t i = 0; i < row.scores.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.9g", row.scores[i]);
      out << row.task << ',' << i / m.n_heads << ',' << i % m.n_heads << ',' << buf << ','
          << row.n_samples << '\n';
    }
  }
}

ImportanceMatrix read_importance_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "task,layer,head,score,n_samples") {
    throw DataError("importance csv: missing header 'task,layer,head,score,n_samples'");
  }
  struct Cell {
    std::string task;
    std::size_t layer, head, n;
    double score;
  };
  std::vector<Cell> cells;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f[5];
    for (int k = 0; k < 5; ++k) {
      if (!std::getline(ss, f[k], ',')) throw DataError("importance csv line " + std::to_string(line_no) + ": expected 5 fields");
    }
    try {
      cells.push_back({f[0], std::stoul(f[1]), std::stoul(f[2]), std::stoul(f[4]), std::stod(f[3])});
    } catch (const std::exception&) {
      throw DataError("importance csv line " + std::to_string(line_no) + ": bad number");
    }
  }
  ImportanceMatrix m;
  for (const auto& c : cells) {
    m.n_layers = std::max(m.n_layers, c.layer + 1);
    m.n_heads = std::max(m.n_heads, c.head + 1);
  }
  for (const auto& c : cells) {
    auto it = std::find_if(m.rows.begin(), m.rows.end(), [&](const ImportanceRow& r) { return r.task == c.task; });
    if (it == m.rows.end()) {
      m.rows.push_back({c.task, std::vector<double>(m.n_layers * m.n_heads, -1.0), 0, c.n});
      it = m.rows.end() - 1;
    }
    it->scores[c.layer * m.n_heads + c.head] = c.score;
  }
  for (const auto& r : m.rows)
    for (double s : r.scores)
      if (s < 0.0) throw DataError("importance csv: task '" + r.task + "' is missing heads or has negative scores");
  return m;
}

std::string to_string(SelectMode m) {
  switch (m) {
    case SelectMode::Top: return "top";
    case SelectMode::Bottom: return "bottom";
    case SelectMode::Random: return "random";
  }
  return "top";
}

SelectMode select_mode_from_string(const std::string& s) {
  if (s == "top") return SelectMode::Top;
  if (s == "bottom") return SelectMode::Bottom;
  if (s == "random") return SelectMode::Random;
  throw ConfigError("unknown selection mode '" + s + "' (top, bottom, random)");
}

std::size_t head_count_for(double alpha, std::size_t total) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
  // Small slack so that e.g. 0.15 * 10 rounds to 2 despite binary representation.
  const auto k = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(total) + 0.5 + 1e-9));
  return std::clamp<std::size_t>(k, 1, total);
}

HeadSet select_heads(std::span<const double> scores, std::size_t n_layers, std::size_t n_heads,
                     double alpha, SelectMode mode, std::uint64_t seed, std::string task) {
  const std::size_t total = n_layers * n_heads;
  if (scores.size() != total) {
    throw ShapeError("select_heads: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(total) + " heads");
  }
  const std::size_t k = head_count_for(alpha, total);
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  if (mode == SelectMode::Random) {
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
    order.resize(k);
    std::sort(order.begin(), order.end());
  } else {
    const bool top = mode == SelectMode::Top;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return top ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    order.resize(k);
  }
  HeadSet set{std::move(task), mode, alpha, seed, {}};
  for (auto flat : order) set.members.push_back({flat / n_heads, flat % n_heads});
  return set;
}

LayerDistribution layer_distribution(std::span<const HeadSet> sets, std::size_t n_layers) {
  LayerDistribution d;
  for (const auto& s : sets) {
    std::vector<std::size_t> counts(n_layers, 0);
    for (const auto& h : s.members) {
      if (h.layer >= n_layers) throw ShapeError("layer_distribution: head layer out of range");
      ++counts[h.layer];
    }
    d.counts.push_back(std::move(counts));
  }
  d.stddev.assign(n_layers, 0.0);
  if (sets.empty()) return d;
  const double n = static_cast<double>(sets.size());
  for (std::size_t l = 0; l < n_layers; ++l) {
    double mean = 0.0;
    for (const auto& c : d.counts) mean += static_cast<double>(c[l]);
    mean /= n;
    double var = 0.0;
    for (const auto& c : d.counts) var += (static_cast<double>(c[l]) - mean) * (static_cast<double>(c[l]) - mean);
    d.stddev[l] = std::sqrt(var / n);
  }
  return d;
}

double head_overlap(const HeadSet& a, const HeadSet& b) {
  if (a.members.size() != b.members.size() || a.members.empty()) {
    throw ShapeError("head_overlap: sets have sizes " + std::to_string(a.members.size()) + " and " +
                     std::to_string(b.members.size()));
  }
  auto x = a.members, y = b.members;
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  std::vector<HeadId> common;
  std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(common));
  return 100.0 * static_cast<double>(common.size()) / static_cast<double>(x.size());
}

std::vector<std::uint8_t> membership(const HeadSet& set, std::size_t n_layers, std::size_t n_heads) {
  std::vector<std::uint8_t> m(n_layers * n_heads, 0);
  for (const auto& h : set.members) {
    if (h.layer >= n_layers || h.head >= n_heads) throw ShapeError("membership: head out of range");
    m[h.layer * n_heads + h.head] = 1;
  }
  return m;
}

GateVector pruning_gates(const HeadSet& set, std::size_t n_layers, std::size_t n_heads) {
  GateVector g(n_layers, n_heads, 1.0f);
  for (const auto& h : set.members) g.set(h, 0.0f);
  return g;
}

}  // namespace headlab
