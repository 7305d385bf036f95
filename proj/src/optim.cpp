#include "evidentia/optim.hpp"

#include <cmath>
#include <numbers>

#include "evidentia/error.hpp"

namespace evidentia {

Adam::Adam(std::size_t size, AdamConfig config)
    : config_(config), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ArgumentError("optimizer size mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i] * grads[i];
    const double update = (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.eps);
    params[i] -= lr * (update + config_.weight_decay * params[i]);
  }
}

double warmup_cosine_lr(double base_lr, std::size_t step, std::size_t warmup, std::size_t total) {
  if (step < warmup) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (total <= warmup) return base_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace evidentia
