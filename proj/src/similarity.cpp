#include "headlab/similarity.hpp"

#include <cmath>
#include <ostream>

#include "headlab/error.hpp"
#include "headlab/format.hpp"

namespace headlab {

std::optional<double> cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: vector lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) return std::nullopt;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

Representations sentence_representations(const Model& model, std::span<const EncodedInput> probes, std::size_t layer,
                                         Pooling pooling) {
  if (layer >= model.config().n_layers) {
    throw ShapeError("representation layer " + std::to_string(layer) + " out of range");
  }
  if (model.task_count() == 0) throw ShapeError("representations need a model with at least one task");
  Representations out;
  out.reserve(probes.size());
  for (const auto& p : probes) {
    const auto cap = model.capture_head_outputs(p, 0, pooling);
    const auto v = cap.pooled[layer].values();
    out.emplace_back(v.begin(), v.end());
  }
  return out;
}

namespace {

void check_reps(const std::vector<std::string>& tasks, std::span<const Representations> reps) {
  if (tasks.size() != reps.size()) throw ShapeError("one representation set per task is required");
  if (reps.empty()) throw ShapeError("no tasks given");
  const std::size_t s = reps[0].size();
  if (s < 2) throw ShapeError("at least two probe sentences are required");
  for (const auto& r : reps) {
    if (r.size() != s) throw ShapeError("every task needs representations of the same probe sentences");
    for (std::size_t k = 0; k < s; ++k)
      if (r[k].size() != reps[0][k].size()) throw ShapeError("representation dimensions differ between tasks");
  }
}

SimilarityMatrix empty_matrix(const std::string& metric, const std::vector<std::string>& tasks) {
  SimilarityMatrix m;
  m.metric = metric;
  m.tasks = tasks;
  m.values.assign(tasks.size(), std::vector<std::optional<double>>(tasks.size()));
  return m;
}

}  // namespace

SimilarityMatrix dse(const std::vector<std::string>& tasks, std::span<const Representations> reps) {
  check_reps(tasks, reps);
  auto m = empty_matrix("DSE", tasks);
  const std::size_t n = tasks.size(), s = reps[0].size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double sum = 0.0;
      std::size_t used = 0;
      for (std::size_t k = 0; k < s; ++k) {
        const auto c = cosine(reps[i][k], reps[j][k]);
        if (!c) continue;
        sum += *c;
        ++used;
      }
      if (used < s) {
        m.flags.push_back(tasks[i] + "/" + tasks[j] + ": " + std::to_string(s - used) +
                          " sentences with a zero representation excluded");
      }
      if (used > 0) m.values[i][j] = m.values[j][i] = sum / static_cast<double>(used);
    }
  m.config = {{"probes", s}};
  return m;
}

Rdm rdm(const Representations& reps) {
  const std::size_t s = reps.size();
  Rdm d(s, std::vector<double>(s, 0.0));
  for (std::size_t a = 0; a < s; ++a)
    for (std::size_t b = a + 1; b < s; ++b) d[a][b] = d[b][a] = 1.0 - cosine(reps[a], reps[b]).value_or(0.0);
  return d;
}

std::vector<double> upper_triangle(const Rdm& m) {
  std::vector<double> out;
  for (std::size_t a = 0; a < m.size(); ++a)
    for (std::size_t b = a + 1; b < m.size(); ++b) out.push_back(m[a][b]);
  return out;
}

std::string to_string(RdmStatistic s) { return s == RdmStatistic::Pearson ? "pearson" : "spearman"; }

RdmStatistic rdm_statistic_from_string(const std::string& s) {
  if (s == "spearman") return RdmStatistic::Spearman;
  if (s == "pearson") return RdmStatistic::Pearson;
  throw ConfigError("unknown RDM statistic '" + s + "' (spearman, pearson)");
}

SimilarityMatrix cra(const std::vector<std::string>& tasks, std::span<const Representations> reps,
                     RdmStatistic statistic) {
  check_reps(tasks, reps);
  auto m = empty_matrix("CRA", tasks);
  std::vector<std::vector<double>> tri;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    for (const auto& v : reps[i])
      if (!cosine(v, v)) {
        m.flags.push_back(tasks[i] + ": zero representation treated as orthogonal to every sentence");
        break;
      }
    tri.push_back(upper_triangle(rdm(reps[i])));
  }
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t j = i; j < tasks.size(); ++j) {
      const auto r = statistic == RdmStatistic::Spearman ? spearman(tri[i], tri[j]) : pearson(tri[i], tri[j]);
      if (!r) {
        m.flags.push_back(tasks[i] + "/" + tasks[j] + ": constant RDM, similarity undefined");
        continue;
      }
      m.values[i][j] = m.values[j][i] = *r;
    }
  m.config = {{"probes", reps[0].size()}, {"statistic", to_string(statistic)}};
  return m;
}

std::vector<double> principal_eigenvector(const std::vector<std::vector<double>>& w, std::size_t steps) {
  const std::size_t n = w.size();
  std::vector<double> v(n, 1.0 / static_cast<double>(n)), next(n);
  for (std::size_t s = 0; s < steps; ++s) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] = 0.0;
      for (std::size_t j = 0; j < n; ++j) next[i] += w[i][j] * v[j];
      total += next[i];
    }
    for (std::size_t i = 0; i < n; ++i) v[i] = next[i] / total;
  }
  return v;
}

SimilarityMatrix ahp(const std::vector<std::string>& tasks, const std::vector<std::vector<double>>& transfer) {
  const std::size_t n = tasks.size();
  if (n < 2) throw ShapeError("AHP needs at least two tasks");
  if (transfer.size() != n) throw ShapeError("transfer matrix needs one row per task");
  for (std::size_t i = 0; i < n; ++i) {
    if (transfer[i].size() != n) throw ShapeError("transfer matrix must be square");
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && !(transfer[i][j] > 0.0 && std::isfinite(transfer[i][j]))) {
        throw ShapeError("transfer result " + tasks[i] + " -> " + tasks[j] + " must be positive");
      }
  }
  auto m = empty_matrix("AHP", tasks);
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<std::size_t> src;
    for (std::size_t i = 0; i < n; ++i)
      if (i != t) src.push_back(i);
    std::vector<std::vector<double>> w(src.size(), std::vector<double>(src.size()));
    for (std::size_t a = 0; a < src.size(); ++a)
      for (std::size_t b = 0; b < src.size(); ++b) w[a][b] = transfer[src[a]][t] / transfer[src[b]][t];
    const auto v = principal_eigenvector(w);
    m.values[t][t] = 0.0;
    for (std::size_t a = 0; a < src.size(); ++a) m.values[src[a]][t] = v[a];
  }
  m.config = {{"construction", "pairwise ratio matrix per target, principal eigenvector"},
              {"power_iterations", 100},
              {"orientation", "row = source, column = target"}};
  return m;
}

Correlation correlate(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("correlate: series lengths differ");
  if (x.size() < 3) throw ShapeError("correlate needs at least three pairs");
  Correlation c;
  for (std::size_t i = 0; i < x.size(); ++i) c.points.emplace_back(x[i], y[i]);
  c.pearson = pearson(x, y);
  c.spearman = spearman(x, y);
  c.fit = linear_fit(x, y);
  if (!c.pearson) c.flags.push_back("zero variance: correlation undefined");
  return c;
}

std::vector<PairValue> pair_values(const SimilarityMatrix& m) {
  std::vector<PairValue> out;
  for (std::size_t a = 0; a < m.tasks.size(); ++a)
    for (std::size_t b = a + 1; b < m.tasks.size(); ++b) {
      const auto& u = m.values[a][b];
      const auto& v = m.values[b][a];
      if (!u || !v) continue;
      out.push_back({a, b, (*u + *v) / 2.0});
    }
  return out;
}

namespace {

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

Json to_json(const SimilarityMatrix& m) {
  Json values = Json::array();
  for (const auto& row : m.values) {
    Json r = Json::array();
    for (const auto& v : row) r.push_back(optional_json(v));
    values.push_back(r);
  }
  return Json{{"metric", m.metric}, {"tasks", m.tasks}, {"values", values}, {"flags", m.flags}, {"config", m.config}};
}

Json to_json(const Correlation& c) {
  Json points = Json::array();
  for (auto [x, y] : c.points) points.push_back({x, y});
  Json j{{"pearson", optional_json(c.pearson)},
         {"spearman", optional_json(c.spearman)},
         {"points", points},
         {"flags", c.flags}};
  j["fit"] = c.fit ? Json{{"slope", c.fit->slope}, {"intercept", c.fit->intercept}} : Json(nullptr);
  return j;
}

void write_similarity_csv(std::ostream& out, const SimilarityMatrix& m) {
  out << m.metric;
  for (const auto& t : m.tasks) out << ',' << t;
  out << '\n';
  for (std::size_t i = 0; i < m.tasks.size(); ++i) {
    out << m.tasks[i];
    for (const auto& v : m.values[i]) out << ',' << (v ? sig9(*v) : std::string("nan"));
    out << '\n';
  }
}

}  // namespace headlab
