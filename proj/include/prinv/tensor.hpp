#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace prinv {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Mode { kTrain, kEval };

// Dense row-major float32 array. Copies share storage; use clone() for a
// deep copy. A tensor participates in the tape when requires_grad is set.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;
  float at(std::size_t i) const { return data()[i]; }
  float at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const float> grad() const;
  // Allocates a zero gradient on first access.
  std::span<float> mutable_grad() const;
  void zero_grad();

  Tensor clone() const;
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

  // Throws NumericalError naming `what` if any entry is NaN or Inf.
  void check_finite(std::string_view what) const;

 private:
  struct Impl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Ordered record of differentiable operations. Entries are appended in
// execution order, so inputs always precede the operations that read them.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(Tensor output, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and runs every backward rule once, newest first.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
};

// The tape ops record into on this thread, or nullptr (no recording).
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording on this thread until destroyed.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// While active, every op output is checked for NaN/Inf.
class CheckedModeScope {
 public:
  CheckedModeScope();
  ~CheckedModeScope();
  CheckedModeScope(const CheckedModeScope&) = delete;
  CheckedModeScope& operator=(const CheckedModeScope&) = delete;

 private:
  bool previous_;
};

bool checked_mode();

// True when an op over `inputs` must be recorded on the active tape.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

}  // namespace prinv
