#pragma once

// Helpers shared by the unit and acceptance suites. Everything here is
// independent of the implementation paths it is used to check.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unistd.h>
#include <vector>

#include "headlab/autograd.hpp"
#include "headlab/tensor.hpp"

namespace headlab::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("headlab_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                            float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

using OpBuilder = std::function<Var(Tape&, std::span<const Var>)>;

/// Norm-wise relative error between the tape gradient and a central finite
/// difference of the weighted-sum loss sum(w * op(inputs)), worst input.
inline double finite_difference_error(const std::vector<Tensor>& inputs, const OpBuilder& op,
                                      std::uint64_t seed, float step = 1e-3f) {
  std::mt19937_64 rng(seed);

  // Output shape and loss weights.
  Tensor weights;
  {
    Tape probe;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(probe.constant(t));
    const auto& out = probe.value(op(probe, vars));
    weights = random_tensor(rng, out.rows(), out.cols());
  }

  auto weighted = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : xs) vars.push_back(tape.constant(t));
    const auto& out = tape.value(op(tape, vars));
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(weights[i]) * out[i];
    return s;
  };

  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  Var out = op(tape, vars);
  const auto rows = tape.value(out).rows();
  const auto cols = tape.value(out).cols();
  Tensor ones = Tensor::matrix(cols, 1, 1.0f);
  Tensor w_scaled = weights;
  for (auto& w : w_scaled.values()) w *= static_cast<float>(rows);
  Var loss = tape.matmul(tape.mean_rows(tape.mul_const(out, w_scaled)), tape.constant(ones));
  tape.backward(loss);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& analytic = tape.grad(vars[k]);
    double diff2 = 0.0, ref2 = 0.0, ana2 = 0.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs;
      auto minus = inputs;
      plus[k][i] += step;
      minus[k][i] -= step;
      const double fd = (weighted(plus) - weighted(minus)) /
                        (static_cast<double>(plus[k][i]) - static_cast<double>(minus[k][i]));
      const double a = analytic[i];
      diff2 += (fd - a) * (fd - a);
      ref2 += fd * fd;
      ana2 += a * a;
    }
    const double scale = std::sqrt(std::max(ref2, ana2));
    if (scale == 0.0) continue;
    worst = std::max(worst, std::sqrt(diff2) / scale);
  }
  return worst;
}

}  // namespace headlab::testing
