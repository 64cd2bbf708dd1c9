#include "prinv/tensor_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "prinv/error.hpp"

namespace prinv {

namespace {

// Marks `out` as differentiable and records its backward rule when any input
// requires a gradient on the active tape.
Tensor finish(Tensor out, std::initializer_list<const Tensor*> inputs,
              const std::function<void(Tensor&)>& make_backward_for) {
  if (checked_mode()) out.check_finite("op output");
  if (!needs_grad(inputs)) return out;
  out.set_requires_grad(true);
  make_backward_for(out);
  return out;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

std::size_t row_count(const Tensor& x) { return x.rank() == 0 ? 0 : x.dim(0); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const float* A = a.data().data();
  const float* B = b.data().data();
  std::vector<float> out(m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    float* orow = &out[i * n];
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = A[i * k + kk];
      if (av == 0.0f) continue;
      const float* brow = B + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return finish(Tensor({m, n}, std::move(out)), {&a, &b}, [&](Tensor& y) {
    active_tape()->record(y, [a, b, y, m, k, n]() mutable {
      const float* dC = y.grad().data();
      if (a.requires_grad()) {
        float* dA = a.mutable_grad().data();
        const float* Bd = b.data().data();
        std::vector<float> bt(n * k);
        for (std::size_t kk = 0; kk < k; ++kk) {
          for (std::size_t j = 0; j < n; ++j) bt[j * k + kk] = Bd[kk * n + j];
        }
        for (std::size_t i = 0; i < m; ++i) {
          float* arow = dA + i * k;
          for (std::size_t j = 0; j < n; ++j) {
            const float g = dC[i * n + j];
            if (g == 0.0f) continue;
            const float* trow = &bt[j * k];
            for (std::size_t kk = 0; kk < k; ++kk) arow[kk] += g * trow[kk];
          }
        }
      }
      if (b.requires_grad()) {
        float* dB = b.mutable_grad().data();
        const float* Ad = a.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          const float* grow = dC + i * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const float av = Ad[i * k + kk];
            if (av == 0.0f) continue;
            float* row = dB + kk * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * grow[j];
          }
        }
      }
    });
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() == 0 || b.rank() != 1 || x.shape().back() != b.dim(0)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const std::size_t n = b.dim(0);
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.data().begin(), x.data().end());
  const auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bd[j];
  }
  return finish(Tensor(x.shape(), std::move(out)), {&x, &b}, [&](Tensor& y) {
    active_tape()->record(y, [x, b, y, rows, n]() mutable {
      const auto dy = y.grad();
      if (x.requires_grad()) {
        auto dx = x.mutable_grad();
        for (std::size_t t = 0; t < dy.size(); ++t) dx[t] += dy[t];
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t r = 0; r < rows; ++r) s += dy[r * n + j];
          db[j] += static_cast<float>(s);
        }
      }
    });
  });
}

Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = A[t] + B[t];
  return finish(Tensor(a.shape(), std::move(out)), {&a, &b}, [&](Tensor& y) {
    active_tape()->record(y, [a, b, y]() mutable {
      const auto dy = y.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = t->mutable_grad();
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
      }
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = A[t] * B[t];
  return finish(Tensor(a.shape(), std::move(out)), {&a, &b}, [&](Tensor& y) {
    active_tape()->record(y, [a, b, y]() mutable {
      const auto dy = y.grad();
      if (a.requires_grad()) {
        auto g = a.mutable_grad();
        const auto B = b.data();
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * B[i];
      }
      if (b.requires_grad()) {
        auto g = b.mutable_grad();
        const auto A = a.data();
        for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * A[i];
      }
    });
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return finish(Tensor(x.shape(), std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y, factor]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * factor;
    });
  });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0f ? v : 0.0f;
  return finish(Tensor(x.shape(), std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y]() mutable {
      const auto dy = y.grad();
      const auto yd = y.data();
      auto g = x.mutable_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (yd[i] > 0.0f) g[i] += dy[i];
      }
    });
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  if (s.len == 0) throw EmptyReductionError("softmax over empty axis");
  const auto xd = x.data();
  std::vector<float> out(x.numel());
  std::vector<double> e(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, double(xd[base + l * s.inner]));
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        e[l] = std::exp(double(xd[base + l * s.inner]) - mx);
        total += e[l];
      }
      for (std::size_t l = 0; l < s.len; ++l) {
        out[base + l * s.inner] = static_cast<float>(e[l] / total);
      }
    }
  }
  return finish(Tensor(x.shape(), std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y, s]() mutable {
      const auto dy = y.grad();
      const auto yd = y.data();
      auto g = x.mutable_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          double dot = 0.0;
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t t = base + l * s.inner;
            dot += double(dy[t]) * yd[t];
          }
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t t = base + l * s.inner;
            g[t] += static_cast<float>(yd[t] * (dy[t] - dot));
          }
        }
      }
    });
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, Mode mode) {
  if (x.rank() == 0 || gamma.rank() != 1 || gamma.shape() != beta.shape() ||
      x.shape().back() != gamma.dim(0)) {
    throw DimensionError("batch_norm: input " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
  }
  const std::size_t c = gamma.dim(0);
  const std::size_t rows = x.numel() / c;
  if (rows == 0) throw EmptyReductionError("batch_norm over zero rows");
  const auto xd = x.data();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (mode == Mode::kTrain) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) mu[j] += xd[r * c + j];
    }
    for (auto& m : mu) m /= double(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xd[r * c + j] - mu[j];
        var[j] += d * d;
      }
    }
    for (auto& v : var) v /= double(rows);
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    const double mom = state.momentum;
    for (std::size_t j = 0; j < c; ++j) {
      rm[j] = static_cast<float>((1.0 - mom) * rm[j] + mom * mu[j]);
      rv[j] = static_cast<float>((1.0 - mom) * rv[j] + mom * var[j]);
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = rm[j];
      var[j] = rv[j];
    }
  }
  std::vector<double> invstd(c);
  for (std::size_t j = 0; j < c; ++j) invstd[j] = 1.0 / std::sqrt(var[j] + state.eps);
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<float> xhat(x.numel()), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xd[r * c + j] - mu[j]) * invstd[j];
      xhat[r * c + j] = static_cast<float>(h);
      out[r * c + j] = static_cast<float>(h * gd[j] + bd[j]);
    }
  }
  return finish(Tensor(x.shape(), std::move(out)), {&x, &gamma, &beta}, [&](Tensor& y) {
    active_tape()->record(
        y, [x, gamma, beta, y, xhat = std::move(xhat), invstd, rows, c, mode]() mutable {
          const auto dy = y.grad();
          std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) {
              sum_dy[j] += dy[r * c + j];
              sum_dy_xhat[j] += double(dy[r * c + j]) * xhat[r * c + j];
            }
          }
          if (gamma.requires_grad()) {
            auto g = gamma.mutable_grad();
            for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<float>(sum_dy_xhat[j]);
          }
          if (beta.requires_grad()) {
            auto g = beta.mutable_grad();
            for (std::size_t j = 0; j < c; ++j) g[j] += static_cast<float>(sum_dy[j]);
          }
          if (x.requires_grad()) {
            auto g = x.mutable_grad();
            const auto gd = gamma.data();
            const double n = double(rows);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < c; ++j) {
                const std::size_t t = r * c + j;
                double d;
                if (mode == Mode::kTrain) {
                  d = gd[j] * invstd[j] / n *
                      (n * dy[t] - sum_dy[j] - double(xhat[t]) * sum_dy_xhat[j]);
                } else {
                  d = gd[j] * invstd[j] * dy[t];
                }
                g[t] += static_cast<float>(d);
              }
            }
          }
        });
  });
}

Tensor dropout(const Tensor& x, float p, Mode mode, Rng& rng) {
  if (!(p >= 0.0f && p < 1.0f)) {
    throw ParameterError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::kEval || p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0f;
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = xd[t] * mask[t];
  return finish(Tensor(x.shape(), std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y, mask = std::move(mask)]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t t = 0; t < dy.size(); ++t) g[t] += dy[t] * mask[t];
    });
  });
}

PoolResult max_pool(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  if (s.len == 0) throw EmptyReductionError("max_pool over empty axis " + std::to_string(axis));
  const auto xd = x.data();
  PoolResult res;
  std::vector<float> out(s.outer * s.inner);
  res.argmax.resize(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    const std::size_t base = o * s.len * s.inner;
    float* vals = &out[o * s.inner];
    std::size_t* arg = &res.argmax[o * s.inner];
    for (std::size_t in = 0; in < s.inner; ++in) {
      vals[in] = xd[base + in];
      arg[in] = base + in;
    }
    for (std::size_t l = 1; l < s.len; ++l) {
      const std::size_t row = base + l * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) {
        if (xd[row + in] > vals[in]) {
          vals[in] = xd[row + in];
          arg[in] = row + in;
        }
      }
    }
  }
  res.values = finish(Tensor(drop_axis(x.shape(), axis), std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y, idx = res.argmax]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t t = 0; t < dy.size(); ++t) g[idx[t]] += dy[t];
    });
  });
  return res;
}

Tensor mean_pool(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  if (s.len == 0) throw EmptyReductionError("mean_pool over empty axis " + std::to_string(axis));
  const auto xd = x.data();
  std::vector<float> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) acc += xd[base + l * s.inner];
      out[o * s.inner + in] = static_cast<float>(acc / double(s.len));
    }
  }
  return finish(Tensor(drop_axis(x.shape(), axis), std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y, s]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      const float w = 1.0f / float(s.len);
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          for (std::size_t l = 0; l < s.len; ++l) g[base + l * s.inner] += dy[o * s.inner + in] * w;
        }
      }
    });
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  const std::size_t rows = row_count(x);
  if (rows == 0) throw DimensionError("gather_rows on tensor " + shape_str(x.shape()));
  const std::size_t cols = x.numel() / rows;
  const auto xd = x.data();
  std::vector<float> out(indices.size() * cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[r]) +
                           " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(&xd[indices[r] * cols], cols, &out[r * cols]);
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return finish(Tensor(std::move(shape), std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y, idx = std::move(idx), cols]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        float* dst = &g[idx[r] * cols];
        const float* src = &dy[r * cols];
        for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
      }
    });
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of zero tensors");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: " + shape_str(p.shape()) + " vs " + shape_str(shape));
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  std::vector<float> out;
  out.reserve(shape_numel(shape));
  bool any_grad = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    any_grad = any_grad || p.requires_grad();
  }
  Tensor y(std::move(shape), std::move(out));
  if (checked_mode()) y.check_finite("concat_rows");
  if (active_tape() && any_grad) {
    y.set_requires_grad(true);
    active_tape()->record(y, [parts, y]() mutable {
      const auto dy = y.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto g = p.mutable_grad();
          for (std::size_t t = 0; t < g.size(); ++t) g[t] += dy[offset + t];
        }
        offset += p.numel();
      }
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of zero tensors");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::size_t cols = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw DimensionError("concat_cols: " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    cols += p.dim(1);
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<float> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.dim(1);
    const auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(&pd[r * pc], pc, &out[r * cols + offset]);
    offset += pc;
  }
  Tensor y({rows, cols}, std::move(out));
  if (checked_mode()) y.check_finite("concat_cols");
  if (active_tape() && any_grad) {
    y.set_requires_grad(true);
    active_tape()->record(y, [parts, y, rows, cols]() mutable {
      const auto dy = y.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t pc = p.dim(1);
        if (p.requires_grad()) {
          auto g = p.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < pc; ++j) g[r * pc + j] += dy[r * cols + offset + j];
          }
        }
        offset += pc;
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return finish(Tensor(std::move(shape), std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y]() mutable {
      const auto dy = y.grad();
      auto g = x.mutable_grad();
      for (std::size_t t = 0; t < dy.size(); ++t) g[t] += dy[t];
    });
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return finish(Tensor({1}, {static_cast<float>(acc)}), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y]() mutable {
      const float dy = y.grad()[0];
      auto g = x.mutable_grad();
      for (auto& v : g) v += dy;
    });
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw EmptyReductionError("mean of empty tensor");
  return scale(sum(x), 1.0f / float(x.numel()));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
  }
  const auto ld = logits.data();
  std::vector<float> probs(b * c);
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw ParameterError("cross_entropy: label " + std::to_string(labels[r]) +
                           " outside [0, " + std::to_string(c) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, double(ld[r * c + j]));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(double(ld[r * c + j]) - mx);
    const double logz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = static_cast<float>(std::exp(double(ld[r * c + j]) - logz));
    }
    total += logz - ld[r * c + labels[r]];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return finish(Tensor({1}, {static_cast<float>(total / double(b))}), {&logits}, [&](Tensor& y) {
    active_tape()->record(y, [logits, y, probs = std::move(probs), lab = std::move(lab), b, c]() mutable {
      const float dy = y.grad()[0] / float(b);
      auto g = logits.mutable_grad();
      for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
          const float onehot = static_cast<std::size_t>(lab[r]) == j ? 1.0f : 0.0f;
          g[r * c + j] += dy * (probs[r * c + j] - onehot);
        }
      }
    });
  });
}

Tensor stop_gradient(const Tensor& x) {
  return Tensor(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
}

Tensor straight_through_scale(const Tensor& x, const Tensor& s) {
  const std::size_t segments = s.numel();
  const std::size_t rows = row_count(x);
  if (s.rank() != 1 || segments == 0 || rows % segments != 0) {
    throw DimensionError("straight_through_scale: " + shape_str(x.shape()) + " by scores " +
                         shape_str(s.shape()));
  }
  const std::size_t rows_per = rows / segments;
  const std::size_t cols = x.numel() / rows;
  std::vector<float> out(x.data().begin(), x.data().end());
  return finish(Tensor(x.shape(), std::move(out)), {&x, &s}, [&](Tensor& y) {
    active_tape()->record(y, [x, s, y, rows_per, cols, segments]() mutable {
      const auto dy = y.grad();
      if (x.requires_grad()) {
        auto g = x.mutable_grad();
        for (std::size_t t = 0; t < dy.size(); ++t) g[t] += dy[t];
      }
      if (s.requires_grad()) {
        auto g = s.mutable_grad();
        const auto xd = x.data();
        const auto sd = s.data();
        for (std::size_t b = 0; b < segments; ++b) {
          double acc = 0.0;
          const std::size_t begin = b * rows_per * cols, end = (b + 1) * rows_per * cols;
          for (std::size_t t = begin; t < end; ++t) acc += double(dy[t]) * xd[t];
          g[b] += static_cast<float>(acc / sd[b]);
        }
      }
    });
  });
}

Tensor neighborhood_correlation(const Tensor& x, std::size_t k) {
  require_rank(x, 2, "neighborhood_correlation");
  if (k == 0 || x.dim(0) % k != 0) {
    throw DimensionError("neighborhood_correlation: " + shape_str(x.shape()) +
                         " is not a multiple of k=" + std::to_string(k));
  }
  const std::size_t groups = x.dim(0) / k;
  const std::size_t c = x.dim(1);
  const auto xd = x.data();
  std::vector<float> out(groups * k * k);
  std::vector<double> norms(groups * k, 0.0);
  std::vector<double> gram(k * k);
  std::vector<float> xt(c * k), row(k);
  for (std::size_t g = 0; g < groups; ++g) {
    const float* base = &xd[g * k * c];
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t j = 0; j < c; ++j) xt[j * k + a] = base[a * c + j];
    }
    for (std::size_t a = 0; a < k; ++a) {
      std::fill(row.begin(), row.end(), 0.0f);
      for (std::size_t j = 0; j < c; ++j) {
        const float xa = base[a * c + j];
        const float* t = &xt[j * k];
        for (std::size_t b = 0; b < k; ++b) row[b] += xa * t[b];
      }
      for (std::size_t b = 0; b < k; ++b) gram[a * k + b] = row[b];
    }
    for (std::size_t a = 0; a < k; ++a) {
      double nrm = 0.0;
      for (std::size_t b = 0; b < k; ++b) nrm += gram[a * k + b] * gram[a * k + b];
      nrm = std::sqrt(nrm);
      norms[g * k + a] = nrm;
      const double inv = nrm < 1e-12 ? 0.0 : 1.0 / nrm;
      for (std::size_t b = 0; b < k; ++b) {
        out[(g * k + a) * k + b] = static_cast<float>(gram[a * k + b] * inv);
      }
    }
  }
  return finish(Tensor({groups * k, k}, std::move(out)), {&x}, [&](Tensor& y) {
    active_tape()->record(y, [x, y, norms = std::move(norms), groups, k, c]() mutable {
      const auto dy = y.grad();
      const auto yd = y.data();
      const auto xd = x.data();
      auto gx = x.mutable_grad();
      std::vector<double> dgram(k * k);
      for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t a = 0; a < k; ++a) {
          const std::size_t row = g * k + a;
          const double nrm = norms[row];
          if (nrm < 1e-12) {
            for (std::size_t b = 0; b < k; ++b) dgram[a * k + b] = 0.0;
            continue;
          }
          double dot = 0.0;
          for (std::size_t b = 0; b < k; ++b) dot += double(dy[row * k + b]) * yd[row * k + b];
          for (std::size_t b = 0; b < k; ++b) {
            dgram[a * k + b] = (dy[row * k + b] - double(yd[row * k + b]) * dot) / nrm;
          }
        }
        // gram[a][b] = <x_a, x_b>: both factors receive the gradient.
        const float* base = &xd[g * k * c];
        float* gbase = &gx[g * k * c];
        for (std::size_t a = 0; a < k; ++a) {
          float* ga = gbase + a * c;
          for (std::size_t b = 0; b < k; ++b) {
            const float w = static_cast<float>(dgram[a * k + b] + dgram[b * k + a]);
            if (w == 0.0f) continue;
            const float* xb = base + b * c;
            for (std::size_t j = 0; j < c; ++j) ga[j] += w * xb[j];
          }
        }
      }
    });
  });
}

}  // namespace prinv
