#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "headlab/model.hpp"

namespace headlab {

struct ImportanceOptions {
  std::size_t batch_size = 32;
  std::size_t max_batches = 100;
  double loss_scale = 1.0;
  // Divide each layer's scores by their l2 norm.
  bool normalize_per_layer = false;
};

/// Mean absolute gate gradient per head for one task, layer-major.
struct ImportanceRow {
  std::string task;
  std::vector<double> scores;
  std::size_t n_batches = 0;
  std::size_t n_samples = 0;
};

struct ImportanceMatrix {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<ImportanceRow> rows;
};

/// dL/dxi for one example under the given gates (eval mode), layer-major.
std::vector<double> gate_gradients(const Model& model, std::size_t task, const Example& example,
                                   const GateVector& gates, double loss_scale = 1.0);

/// Scores the first min(N, batch_size * max_batches) samples with all gates
/// at 1. Throws DataError on an empty sample list.
ImportanceRow head_importance(const Model& model, std::size_t task, std::span<const Example> samples,
                              const ImportanceOptions& options = {});

void write_importance_csv(std::ostream& out, const ImportanceMatrix& m);
ImportanceMatrix read_importance_csv(std::istream& in);

enum class SelectMode { Top, Bottom, Random };
std::string to_string(SelectMode m);
SelectMode select_mode_from_string(const std::string& s);

struct HeadSet {
  std::string task;
  SelectMode mode = SelectMode::Top;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  std::vector<HeadId> members;  // ranked for top/bottom, ascending for random
};

/// round_half_up(alpha * total), at least 1.
std::size_t head_count_for(double alpha, std::size_t total);

/// Ties are broken by layer, then head, ascending.
HeadSet select_heads(std::span<const double> scores, std::size_t n_layers, std::size_t n_heads,
                     double alpha, SelectMode mode, std::uint64_t seed = 0, std::string task = {});

struct LayerDistribution {
  std::vector<std::vector<std::size_t>> counts;  // per set, per layer
  std::vector<double> stddev;                    // per layer, population std across sets
};

LayerDistribution layer_distribution(std::span<const HeadSet> sets, std::size_t n_layers);

/// 100 * |A & B| / |A|; sets must have equal size.
double head_overlap(const HeadSet& a, const HeadSet& b);

/// 1 for members, 0 elsewhere, layer-major.
std::vector<std::uint8_t> membership(const HeadSet& set, std::size_t n_layers, std::size_t n_heads);
/// All gates 1 except members at 0.
GateVector pruning_gates(const HeadSet& set, std::size_t n_layers, std::size_t n_heads);

}  // namespace headlab
