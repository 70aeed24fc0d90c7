#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headlab/json_io.hpp"
#include "headlab/model.hpp"
#include "headlab/stats.hpp"

namespace headlab {

/// One representation vector per probe sentence.
using Representations = std::vector<std::vector<double>>;
using Rdm = std::vector<std::vector<double>>;

/// Task x task similarity; unset cells are undefined (see flags).
struct SimilarityMatrix {
  std::string metric;
  std::vector<std::string> tasks;
  std::vector<std::vector<std::optional<double>>> values;
  std::vector<std::string> flags;
  Json config = Json::object();
};

/// nullopt when either vector has zero norm.
std::optional<double> cosine(std::span<const double> a, std::span<const double> b);

/// Pooled final-or-chosen-layer representation of each probe input.
Representations sentence_representations(const Model& model, std::span<const EncodedInput> probes, std::size_t layer,
                                         Pooling pooling = Pooling::Mean);

/// Mean cosine between the two models' representations of each sentence.
/// Sentences where either vector is zero are skipped and flagged.
SimilarityMatrix dse(const std::vector<std::string>& tasks, std::span<const Representations> reps);

/// 1 - cosine between sentence pairs; a zero vector counts as cosine 0.
Rdm rdm(const Representations& reps);
/// Strict upper triangle, row by row.
std::vector<double> upper_triangle(const Rdm& m);

enum class RdmStatistic { Spearman, Pearson };
std::string to_string(RdmStatistic s);
RdmStatistic rdm_statistic_from_string(const std::string& s);

/// Correlation between the tasks' RDM upper triangles.
SimilarityMatrix cra(const std::vector<std::string>& tasks, std::span<const Representations> reps,
                     RdmStatistic statistic = RdmStatistic::Spearman);

/// Transfer-based affinity. For each target t, the sources i != t are
/// compared through W[i][j] = P[i][t] / P[j][t]; the principal eigenvector of
/// W (100 power-iteration steps from uniform, normalised to sum 1) fills
/// column t. The diagonal is 0. Throws ShapeError unless P is square with
/// positive finite entries and at least 2 tasks.
SimilarityMatrix ahp(const std::vector<std::string>& tasks, const std::vector<std::vector<double>>& transfer);

/// Dominant eigenvector of a positive square matrix, normalised to sum 1.
std::vector<double> principal_eigenvector(const std::vector<std::vector<double>>& w, std::size_t steps = 100);

struct Correlation {
  std::optional<double> pearson;
  std::optional<double> spearman;
  std::optional<LinearFit> fit;  // y on x
  std::vector<std::pair<double, double>> points;
  std::vector<std::string> flags;
};

/// Requires at least three matched pairs (ShapeError otherwise).
Correlation correlate(std::span<const double> x, std::span<const double> y);

/// Task pairs (i < j) with the mean of the two directed entries, skipping
/// undefined cells.
struct PairValue {
  std::size_t a = 0;
  std::size_t b = 0;
  double value = 0.0;
};
std::vector<PairValue> pair_values(const SimilarityMatrix& m);

Json to_json(const SimilarityMatrix& m);
Json to_json(const Correlation& c);
void write_similarity_csv(std::ostream& out, const SimilarityMatrix& m);

}  // namespace headlab
