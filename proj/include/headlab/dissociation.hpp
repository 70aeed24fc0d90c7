#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "headlab/importance.hpp"
#include "headlab/json_io.hpp"

namespace headlab {

/// pruned / base, or nullopt when base <= 0 or either value is not finite.
std::optional<double> relative_performance(double base, double pruned);

/// Metric values in the layout of a prune table: pruned[j][i] is task i's
/// metric after pruning the heads selected for task j.
struct PerformanceTable {
  std::vector<std::string> tasks;
  std::vector<double> base;
  std::vector<std::vector<double>> pruned;

  void validate() const;
};

/// rp[i][j]: relative performance of task i with task j's heads pruned.
using RpMatrix = std::vector<std::vector<std::optional<double>>>;
RpMatrix rp_matrix(const PerformanceTable& table);

struct DualDissociation {
  double d_a = 0.0;  // percent
  double d_b = 0.0;
  double d = 0.0;
};

/// RP cells for tasks A and B under the two prunings. Throws ShapeError if any
/// cell is undefined.
DualDissociation dual_dissociation(std::optional<double> rp_a_under_a, std::optional<double> rp_a_under_b,
                                   std::optional<double> rp_b_under_a, std::optional<double> rp_b_under_b);
DualDissociation dual_dissociation(const RpMatrix& rp);

struct MultiDissociation {
  std::vector<std::optional<double>> per_task;  // percent; nullopt when a needed cell is undefined
  std::optional<double> average;                // mean of per_task when all are available
};

MultiDissociation multi_dissociation(const RpMatrix& rp);

struct Thresholds {
  double distinct = 10.0;
  double single = 10.0;
  double mild = 5.0;
};

enum class DualLabel { Double, Single, Inconsistent, None };
enum class MultiLabel { Distinct, Mild, None };
std::string to_string(DualLabel l);
std::string to_string(MultiLabel l);

struct DualClassification {
  DualLabel label = DualLabel::None;
  bool distinct = false;  // double dissociation with D >= distinct threshold
};

struct MultiClassification {
  MultiLabel label = MultiLabel::None;
  std::vector<int> signs;  // sign of each D_i: -1, 0, +1
};

DualClassification classify_dual(double d_a, double d_b, const Thresholds& t = {});
/// Throws ShapeError when some D_i is unavailable.
MultiClassification classify_multi(const MultiDissociation& m, const Thresholds& t = {});

struct DissociationReport {
  std::vector<std::string> tasks;
  double alpha = 0.0;
  PerformanceTable performance;
  RpMatrix rp;
  MultiDissociation scores;
  std::optional<DualDissociation> dual;  // present for two tasks
  std::string label;
  bool distinct = false;
  std::vector<int> signs;
  std::vector<std::vector<double>> overlap;  // percent, empty when head sets are unknown
  std::optional<LayerDistribution> layers;
  std::vector<std::string> flags;
};

DissociationReport make_dissociation_report(const PerformanceTable& table, double alpha,
                                            const Thresholds& t = {});

Json to_json(const DissociationReport& r);

/// Prune-table CSV: header `pruned_for_task,<tasks>`, one row per task,
/// then `base` and `D_i` rows. Values are percent with 2 decimals.
void write_table_csv(std::ostream& out, const DissociationReport& r);
/// Reads the task rows and `base`; other rows (e.g. `D_i`, `Random`) are ignored.
PerformanceTable read_table_csv(std::istream& in);

}  // namespace headlab
