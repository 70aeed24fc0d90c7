#pragma once

#include <optional>
#include <span>
#include <vector>

namespace headlab {

double mean(std::span<const double> x);

/// Ranks starting at 1; tied values share the average of their ranks.
std::vector<double> average_ranks(std::span<const double> x);

/// nullopt when either series has zero variance or the lengths differ or are < 2.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
};
/// Least squares y = slope * x + intercept; nullopt when x has zero variance.
std::optional<LinearFit> linear_fit(std::span<const double> x, std::span<const double> y);

}  // namespace headlab
