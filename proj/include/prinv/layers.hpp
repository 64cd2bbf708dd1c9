#pragma once

#include <cstddef>
#include <string>

#include "prinv/params.hpp"
#include "prinv/rng.hpp"
#include "prinv/tensor_ops.hpp"

namespace prinv {

// Uniform(-bound, bound) tensor.
Tensor uniform_tensor(Shape shape, double bound, Rng& rng);

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return fully_connected(x, weight, bias); }
};

// He-uniform weights (bound sqrt(6 / in)) scaled by `gain`, zero bias.
Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   Rng& rng, double gain = 1.0);

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  BatchNormState state;

  Tensor operator()(const Tensor& x, Mode mode) const {
    BatchNormState s = state;  // shares the running-stat buffers
    return batch_norm(x, gamma, beta, s, mode);
  }
};

BatchNorm make_batch_norm(ParamStore& store, const std::string& name, std::size_t channels);

// FC -> BN -> ReLU.
struct DenseBnRelu {
  Linear fc;
  BatchNorm bn;

  Tensor operator()(const Tensor& x, Mode mode) const { return relu(bn(fc(x), mode)); }
};

DenseBnRelu make_dense_bn_relu(ParamStore& store, const std::string& name, std::size_t in,
                               std::size_t out, Rng& rng);

}  // namespace prinv
