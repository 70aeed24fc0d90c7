#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "headlab/tensor.hpp"

namespace headlab {

enum class DecayMode { Constant, Linear };

struct AdamConfig {
  float learning_rate = 2e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  double warmup_proportion = 0.1;
  std::size_t total_steps = 1;
  DecayMode decay = DecayMode::Constant;
};

/// Linear warm-up to the base rate over ceil(proportion * total) steps,
/// then constant or linearly decaying to zero at total_steps.
class WarmupSchedule {
 public:
  WarmupSchedule(float base, double warmup_proportion, std::size_t total_steps, DecayMode decay);

  float rate(std::size_t step) const;
  std::size_t warmup_steps() const { return warmup_steps_; }

 private:
  float base_;
  std::size_t warmup_steps_;
  std::size_t total_steps_;
  DecayMode decay_;
};

/// Per-element update permission for one parameter. Empty means "all".
using ElementMask = std::vector<std::uint8_t>;

/// Adam with bias correction. Elements whose mask entry is 0 are skipped
/// entirely: the parameter, its gradient and both moments are left as is.
class Adam {
 public:
  Adam(AdamConfig config, std::span<const Parameter> params);

  /// Applies one update and advances the step counter. masks is either empty
  /// or holds one ElementMask per parameter.
  /// Throws NumericalError naming the first parameter with a non-finite gradient.
  void step(std::span<Parameter> params, std::span<const ElementMask> masks = {});

  float current_rate() const { return schedule_.rate(step_); }
  std::size_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }

  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_step_count(std::size_t s) { step_ = s; }

 private:
  AdamConfig config_;
  WarmupSchedule schedule_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t step_ = 0;
};

}  // namespace headlab
