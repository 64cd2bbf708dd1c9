#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "prinv/rng.hpp"
#include "prinv/tensor.hpp"

namespace prinv {

// a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., n] + b[n], broadcast over the leading rows.
Tensor add_bias(const Tensor& x, const Tensor& b);

// x[m x k] * w[k x n] + b[n].
Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor relu(const Tensor& x);

// Softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

// Per-channel normalization over every row of x[..., c]. Train mode uses batch
// statistics (biased variance) and updates the running averages in `state`;
// eval mode uses the running averages.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, Mode mode);

// Inverted dropout: kept entries are scaled by 1 / (1 - p). Identity in eval.
Tensor dropout(const Tensor& x, float p, Mode mode, Rng& rng);

struct PoolResult {
  Tensor values;
  // Flat input offset of the winning entry for each output element.
  std::vector<std::size_t> argmax;
};

// Maximum over `axis`; the axis is removed from the shape. Ties resolve to
// the lowest position along the axis.
PoolResult max_pool(const Tensor& x, std::size_t axis);

Tensor mean_pool(const Tensor& x, std::size_t axis);

// out[r] = x[indices[r]] for x viewed as [rows x cols].
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);

// Concatenation along axis 0 (rows) or the last axis (columns) of 2-D tensors.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Mean softmax cross-entropy of logits[b x c] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor stop_gradient(const Tensor& x);

// Forward: identity on x[rows x c]. Backward: behaves as x * s_b / sg(s_b)
// where b = row / (rows / segments), so gradient reaches the scores s[segments]
// without changing forward values.
Tensor straight_through_scale(const Tensor& x, const Tensor& s);

// For x[(g*k) x c] holding g groups of k rows, returns [(g*k) x k] where row
// (g, a) is the l2-normalized vector of inner products <x_ga, x_gb> over b.
// Rows with norm below 1e-12 become zero.
Tensor neighborhood_correlation(const Tensor& x, std::size_t k);

}  // namespace prinv
