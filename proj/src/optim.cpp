#include "headlab/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "headlab/error.hpp"

namespace headlab {

WarmupSchedule::WarmupSchedule(float base, double warmup_proportion, std::size_t total_steps,
                               DecayMode decay)
    : base_(base), total_steps_(total_steps), decay_(decay) {
  if (base < 0.0f) throw ConfigError("learning rate must be non-negative");
  if (warmup_proportion < 0.0 || warmup_proportion > 1.0) {
    throw ConfigError("warm-up proportion must lie in [0, 1]");
  }
  // Tolerate representation error, e.g. 0.1 * 100 = 10.000000000000002.
  warmup_steps_ = static_cast<std::size_t>(
      std::ceil(warmup_proportion * static_cast<double>(total_steps) - 1e-9));
}

float WarmupSchedule::rate(std::size_t step) const {
  if (step < warmup_steps_) {
    return base_ * static_cast<float>(step + 1) / static_cast<float>(warmup_steps_);
  }
  if (decay_ == DecayMode::Linear && total_steps_ > warmup_steps_) {
    const double remaining = static_cast<double>(total_steps_) - static_cast<double>(step);
    const double span = static_cast<double>(total_steps_ - warmup_steps_);
    return remaining <= 0.0 ? 0.0f : static_cast<float>(base_ * remaining / span);
  }
  return base_;
}

Adam::Adam(AdamConfig config, std::span<const Parameter> params)
    : config_(config),
      schedule_(config.learning_rate, config.warmup_proportion, config.total_steps, config.decay) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.value.shape(), 0.0f);
    v_.emplace_back(p.value.shape(), 0.0f);
  }
}

void Adam::step(std::span<Parameter> params, std::span<const ElementMask> masks) {
  if (params.size() != m_.size()) {
    throw std::logic_error("adam: parameter list changed since construction");
  }
  if (!masks.empty() && masks.size() != params.size()) {
    throw std::logic_error("adam: mask list must match the parameter list");
  }
  if (step_ >= config_.total_steps) {
    throw std::logic_error("adam: step " + std::to_string(step_) + " exceeds planned " +
                           std::to_string(config_.total_steps) + " steps");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& g = params[p].grad;
    const ElementMask* mask = masks.empty() || masks[p].empty() ? nullptr : &masks[p];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      if (!std::isfinite(g[i])) {
        throw NumericalError("non-finite gradient in parameter '" + params[p].name + "'");
      }
    }
  }

  const float lr = schedule_.rate(step_);
  const float b1 = config_.beta1, b2 = config_.beta2;
  const auto t = static_cast<float>(step_ + 1);
  const float c1 = 1.0f - std::pow(b1, t);
  const float c2 = 1.0f - std::pow(b2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p].value;
    const auto& g = params[p].grad;
    auto& m = m_[p];
    auto& v = v_[p];
    const ElementMask* mask = masks.empty() || masks[p].empty() ? nullptr : &masks[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const float mhat = c1 > 0.0f ? m[i] / c1 : m[i];
      const float vhat = c2 > 0.0f ? v[i] / c2 : v[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
  ++step_;
}

}  // namespace headlab
