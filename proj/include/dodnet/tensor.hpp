#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dodnet {

/// Ordered extents. 5-D activations use (N, C, D, H, W).
using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
};

/// Shared handle to a dense row-major array. Copies alias the same storage,
/// which is what the tape needs to route gradients back to parameters.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : s_(std::make_shared<TensorStorage<T>>()) {
    for (auto e : shape) {
      if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    }
    s_->data.assign(static_cast<std::size_t>(numel(shape)), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<TensorStorage<T>>()) {
    if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
      throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                       to_string(shape));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::int64_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t rank() const { return s_->shape.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(s_->data.size()); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T& operator[](std::int64_t i) { return s_->data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return s_->data[static_cast<std::size_t>(i)]; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  std::span<T> mutable_grad() {
    ensure_grad();
    return s_->grad;
  }
  void ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T{});
  }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T{}); }
  void clear_grad() { s_->grad.clear(); }

  /// Fresh storage holding a copy of the values; never requires grad.
  Tensor detach() const { return Tensor(s_->shape, s_->data); }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const std::shared_ptr<TensorStorage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

/// Ordered log of differentiable operations executed while the tape is
/// active. Entries are replayed in exact reverse order by backward().
template <typename T>
class Tape {
 public:
  struct Entry {
    const char* name;
    std::shared_ptr<TensorStorage<T>> output;
    std::function<void(const std::vector<T>& grad_out)> backward;
  };

  void record(const char* name, const Tensor<T>& output,
              std::function<void(const std::vector<T>& grad_out)> fn) {
    entries_.push_back(Entry{name, output.storage(), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. The tape is cleared afterwards,
  /// releasing every saved intermediate. When `visited` is given, names of the
  /// entries that received a gradient are appended in traversal order.
  void backward(const Tensor<T>& loss, std::vector<std::string>* visited = nullptr);

 private:
  std::vector<Entry> entries_;
};

/// Installs a tape for the current thread for the lifetime of the scope.
/// Operations only record while a tape is installed.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape();

/// Runs backward on the tape installed for this thread.
template <typename T>
void backward(const Tensor<T>& loss);

namespace detail {

/// True when an op with these inputs must be recorded.
template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Accumulation target for an input's gradient, or nullptr when the input
/// does not participate in differentiation.
template <typename T>
T* grad_target(const std::shared_ptr<TensorStorage<T>>& s) {
  if (!s || !s->requires_grad) return nullptr;
  if (s->grad.empty()) s->grad.assign(s->data.size(), T{});
  return s->grad.data();
}

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dodnet
