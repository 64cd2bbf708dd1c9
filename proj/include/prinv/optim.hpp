#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "prinv/tensor.hpp"

namespace prinv {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of `params` in place. An empty gradient span
// is treated as zero. Moment buffers are created on the first call.
void adam_step(const std::vector<Tensor>& params,
               const std::vector<std::span<const float>>& grads, AdamState& state,
               double lr, const AdamHyper& hyper = {});

// Same, reading each parameter's accumulated gradient.
void adam_step(const std::vector<Tensor>& params, AdamState& state, double lr,
               const AdamHyper& hyper = {});

// lr = base * decay_rate ^ (step / decay_step); the exponent is floored when
// staircase is set.
struct LrSchedule {
  double base = 0.001;
  double decay_rate = 0.7;
  std::uint64_t decay_step = 200000;
  bool staircase = false;

  double operator()(std::uint64_t step) const;
};

}  // namespace prinv
