#include "prinv/params.hpp"

#include "prinv/error.hpp"

namespace prinv {

Tensor ParamStore::add(std::string name, Tensor tensor, bool learnable) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name " + name);
  tensor.set_requires_grad(learnable);
  entries_.push_back({std::move(name), tensor, learnable});
  return tensor;
}

std::vector<Tensor> ParamStore::learnable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.learnable) out.push_back(e.tensor);
  }
  return out;
}

const NamedTensor* ParamStore::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::size_t ParamStore::learnable_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.learnable && e.name.compare(0, prefix.size(), prefix) == 0) n += e.tensor.numel();
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

}  // namespace prinv
