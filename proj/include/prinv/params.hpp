#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "prinv/tensor.hpp"

namespace prinv {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  // Buffers such as batch-norm running statistics are saved but not optimized.
  bool learnable = true;
};

// Ordered registry of every model tensor. Names are unique.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor tensor, bool learnable = true);

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<Tensor> learnable() const;
  const NamedTensor* find(const std::string& name) const;

  // Total element count of learnable tensors whose name starts with `prefix`.
  std::size_t learnable_count(const std::string& prefix = "") const;

  void zero_grad();

 private:
  std::vector<NamedTensor> entries_;
};

}  // namespace prinv
