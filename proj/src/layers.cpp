#include "prinv/layers.hpp"

#include <cmath>

namespace prinv {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor(std::move(shape), std::move(data));
}

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   Rng& rng, double gain) {
  Linear l;
  l.weight = store.add(name + ".weight", uniform_tensor({in, out}, gain * std::sqrt(6.0 / double(in)), rng));
  l.bias = store.add(name + ".bias", Tensor::zeros({out}));
  return l;
}

BatchNorm make_batch_norm(ParamStore& store, const std::string& name, std::size_t channels) {
  BatchNorm bn;
  bn.gamma = store.add(name + ".gamma", Tensor::full({channels}, 1.0f));
  bn.beta = store.add(name + ".beta", Tensor::zeros({channels}));
  bn.state.running_mean = store.add(name + ".running_mean", Tensor::zeros({channels}), false);
  bn.state.running_var = store.add(name + ".running_var", Tensor::full({channels}, 1.0f), false);
  return bn;
}

DenseBnRelu make_dense_bn_relu(ParamStore& store, const std::string& name, std::size_t in,
                               std::size_t out, Rng& rng) {
  return {make_linear(store, name + ".fc", in, out, rng), make_batch_norm(store, name + ".bn", out)};
}

}  // namespace prinv
