#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace evidentia {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled (AdamW) weight decay; 0 gives plain Adam.
  double weight_decay = 0.0;
};

/// Adam / AdamW over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t size, AdamConfig config = {});

  void step(std::span<double> params, std::span<const double> grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
/// `step` is 0-based.
double warmup_cosine_lr(double base_lr, std::size_t step, std::size_t warmup, std::size_t total);

}  // namespace evidentia
