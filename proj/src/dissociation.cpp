#include "headlab/dissociation.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "headlab/error.hpp"
#include "headlab/format.hpp"

namespace headlab {

std::optional<double> relative_performance(double base, double pruned) {
  if (!std::isfinite(base) || !std::isfinite(pruned) || base <= 0.0) return std::nullopt;
  return pruned / base;
}

void PerformanceTable::validate() const {
  const std::size_t n = tasks.size();
  if (n < 2) throw ShapeError("performance table needs at least two tasks");
  if (base.size() != n || pruned.size() != n) {
    throw ShapeError("performance table: expected " + std::to_string(n) + " base values and rows");
  }
  for (const auto& row : pruned)
    if (row.size() != n) throw ShapeError("performance table: every row needs " + std::to_string(n) + " values");
}

RpMatrix rp_matrix(const PerformanceTable& table) {
  table.validate();
  const std::size_t n = table.tasks.size();
  RpMatrix rp(n, std::vector<std::optional<double>>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) rp[i][j] = relative_performance(table.base[i], table.pruned[j][i]);
  return rp;
}

namespace {

// (mean of off-diagonal cells - own cell) * 100, or nullopt if a cell is missing.
std::optional<double> task_score(const RpMatrix& rp, std::size_t i) {
  const std::size_t n = rp.size();
  if (!rp[i][i]) return std::nullopt;
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    if (!rp[i][j]) return std::nullopt;
    sum += *rp[i][j];
  }
  return (sum / static_cast<double>(n - 1) - *rp[i][i]) * 100.0;
}

void check_square(const RpMatrix& rp) {
  if (rp.size() < 2) throw ShapeError("dissociation needs at least two tasks");
  for (const auto& row : rp)
    if (row.size() != rp.size()) throw ShapeError("RP matrix must be square");
}

}  // namespace

DualDissociation dual_dissociation(std::optional<double> rp_a_under_a, std::optional<double> rp_a_under_b,
                                   std::optional<double> rp_b_under_a, std::optional<double> rp_b_under_b) {
  return dual_dissociation(RpMatrix{{rp_a_under_a, rp_a_under_b}, {rp_b_under_a, rp_b_under_b}});
}

DualDissociation dual_dissociation(const RpMatrix& rp) {
  check_square(rp);
  if (rp.size() != 2) throw ShapeError("dual dissociation needs exactly two tasks");
  const auto a = task_score(rp, 0), b = task_score(rp, 1);
  if (!a || !b) throw ShapeError("dual dissociation: relative performance cell undefined (base <= 0)");
  return {*a, *b, (*a + *b) / 2.0};
}

MultiDissociation multi_dissociation(const RpMatrix& rp) {
  check_square(rp);
  MultiDissociation out;
  double sum = 0.0;
  bool complete = true;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    out.per_task.push_back(task_score(rp, i));
    if (out.per_task.back()) sum += *out.per_task.back();
    else complete = false;
  }
  if (complete) out.average = sum / static_cast<double>(rp.size());
  return out;
}

std::string to_string(DualLabel l) {
  switch (l) {
    case DualLabel::Double: return "double";
    case DualLabel::Single: return "single";
    case DualLabel::Inconsistent: return "inconsistent";
    case DualLabel::None: return "none";
  }
  return "none";
}

std::string to_string(MultiLabel l) {
  switch (l) {
    case MultiLabel::Distinct: return "distinct";
    case MultiLabel::Mild: return "mild";
    case MultiLabel::None: return "none";
  }
  return "none";
}

DualClassification classify_dual(double d_a, double d_b, const Thresholds& t) {
  if (!std::isfinite(d_a) || !std::isfinite(d_b)) throw ShapeError("classify: dissociation scores must be finite");
  if (d_a > 0.0 && d_b > 0.0) return {DualLabel::Double, (d_a + d_b) / 2.0 >= t.distinct};
  if ((d_a > t.single && d_b < 0.0) || (d_b > t.single && d_a < 0.0)) return {DualLabel::Single, false};
  if (d_a < 0.0 && d_b < 0.0) return {DualLabel::Inconsistent, false};
  return {DualLabel::None, false};
}

MultiClassification classify_multi(const MultiDissociation& m, const Thresholds& t) {
  if (!m.average) throw ShapeError("classify: some per-task dissociation score is unavailable");
  MultiClassification c;
  for (const auto& d : m.per_task) c.signs.push_back(*d > 0.0 ? 1 : (*d < 0.0 ? -1 : 0));
  const double d = *m.average;
  c.label = d >= t.distinct ? MultiLabel::Distinct : (d > t.mild ? MultiLabel::Mild : MultiLabel::None);
  return c;
}

DissociationReport make_dissociation_report(const PerformanceTable& table, double alpha, const Thresholds& t) {
  DissociationReport r;
  r.tasks = table.tasks;
  r.alpha = alpha;
  r.performance = table;
  r.rp = rp_matrix(table);
  r.scores = multi_dissociation(r.rp);
  const std::size_t n = table.tasks.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (!r.rp[i][j]) {
        r.flags.push_back("relative performance undefined for task '" + table.tasks[i] + "' (base " +
                          sig9(table.base[i]) + " <= 0); excluded");
        break;
      }
  if (!r.scores.average) {
    r.label = "unavailable";
    return r;
  }
  if (n == 2) {
    r.dual = dual_dissociation(r.rp);
    const auto c = classify_dual(r.dual->d_a, r.dual->d_b, t);
    r.label = to_string(c.label);
    r.distinct = c.distinct;
    r.signs = classify_multi(r.scores, t).signs;
  } else {
    const auto c = classify_multi(r.scores, t);
    r.label = to_string(c.label);
    r.distinct = c.label == MultiLabel::Distinct;
    r.signs = c.signs;
  }
  return r;
}

Json to_json(const DissociationReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  Json rp = Json::array();
  for (const auto& row : r.rp) {
    Json jr = Json::array();
    for (const auto& v : row) jr.push_back(opt(v));
    rp.push_back(jr);
  }
  Json per_task = Json::object();
  for (std::size_t i = 0; i < r.tasks.size(); ++i) per_task[r.tasks[i]] = opt(r.scores.per_task[i]);
  Json j{{"tasks", r.tasks},
         {"alpha", r.alpha},
         {"base", r.performance.base},
         {"pruned", r.performance.pruned},
         {"rp", rp},
         {"d_i", per_task},
         {"d", opt(r.scores.average)},
         {"label", r.label},
         {"distinct", r.distinct},
         {"signs", r.signs},
         {"flags", r.flags}};
  if (r.dual) j["dual"] = {{"d_a", r.dual->d_a}, {"d_b", r.dual->d_b}, {"d", r.dual->d}};
  if (!r.overlap.empty()) j["overlap"] = r.overlap;
  if (r.layers) j["layer_distribution"] = {{"counts", r.layers->counts}, {"stddev", r.layers->stddev}};
  return j;
}

void write_table_csv(std::ostream& out, const DissociationReport& r) {
  const std::size_t n = r.tasks.size();
  out << "pruned_for_task";
  for (const auto& t : r.tasks) out << ',' << t;
  out << '\n';
  for (std::size_t j = 0; j < n; ++j) {
    out << r.tasks[j];
    for (std::size_t i = 0; i < n; ++i) out << ',' << fixed2(r.performance.pruned[j][i]);
    out << '\n';
  }
  out << "base";
  for (double b : r.performance.base) out << ',' << fixed2(b);
  out << "\nD_i";
  for (const auto& d : r.scores.per_task) out << ',' << (d ? fixed2(*d) : std::string("nan"));
  out << '\n';
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

PerformanceTable read_table_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("prune table: empty input");
  const auto header = split_csv(line);
  if (header.size() < 3 || header[0] != "pruned_for_task") {
    throw DataError("prune table line 1: expected header 'pruned_for_task,<task>,<task>,...'");
  }
  PerformanceTable t;
  t.tasks.assign(header.begin() + 1, header.end());
  const std::size_t n = t.tasks.size();
  std::vector<std::optional<std::vector<double>>> rows(n);
  std::optional<std::vector<double>> base;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    const std::string& key = cells[0];
    std::optional<std::size_t> row;
    for (std::size_t i = 0; i < n; ++i)
      if (t.tasks[i] == key) row = i;
    if (!row && key != "base") continue;
    if (cells.size() != n + 1) {
      throw DataError("prune table line " + std::to_string(line_no) + ": expected " + std::to_string(n + 1) +
                      " fields, found " + std::to_string(cells.size()));
    }
    std::vector<double> values;
    for (std::size_t k = 1; k <= n; ++k) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cells[k], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cells[k].size()) {
        throw DataError("prune table line " + std::to_string(line_no) + ": '" + cells[k] + "' is not a number");
      }
      values.push_back(v);
    }
    auto& slot = row ? rows[*row] : base;
    if (slot) throw DataError("prune table line " + std::to_string(line_no) + ": duplicate row '" + key + "'");
    slot = std::move(values);
  }
  if (!base) throw DataError("prune table: missing 'base' row");
  t.base = *base;
  for (std::size_t i = 0; i < n; ++i) {
    if (!rows[i]) throw DataError("prune table: missing row for task '" + t.tasks[i] + "'");
    t.pruned.push_back(*rows[i]);
  }
  return t;
}

}  // namespace headlab
