#include "prinv/optim.hpp"

#include <cmath>
#include <string>

#include "prinv/error.hpp"

namespace prinv {

void adam_step(const std::vector<Tensor>& params,
               const std::vector<std::span<const float>>& grads, AdamState& state,
               double lr, const AdamHyper& hyper) {
  if (!(lr > 0.0)) throw ParameterError("adam: learning rate must be positive");
  if (grads.size() != params.size()) {
    throw DimensionError("adam: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adam: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() ||
        (!grads[i].empty() && grads[i].size() != params[i].numel())) {
      throw DimensionError("adam: gradient/state shape mismatch for parameter " +
                           std::to_string(i) + " " + shape_str(params[i].shape()));
    }
  }
  ++state.step;
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto data = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto g = grads[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double gj = g.empty() ? 0.0 : double(g[j]);
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      data[j] = static_cast<float>(data[j] - lr * mhat / (std::sqrt(vhat) + hyper.eps));
    }
  }
}

void adam_step(const std::vector<Tensor>& params, AdamState& state, double lr,
               const AdamHyper& hyper) {
  std::vector<std::span<const float>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adam_step(params, grads, state, lr, hyper);
}

double LrSchedule::operator()(std::uint64_t step) const {
  double ratio = double(step) / double(decay_step);
  if (staircase) ratio = std::floor(ratio);
  return base * std::pow(decay_rate, ratio);
}

}  // namespace prinv
