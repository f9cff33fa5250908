#include "dodnet/tensor.hpp"

#include <sstream>

namespace dodnet {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss, std::vector<std::string>* visited) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  auto& seed = loss.storage()->grad;
  seed.assign(1, T{1});
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    if (visited) visited->emplace_back(it->name);
    it->backward(it->output->grad);
  }
  entries_.clear();
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) throw std::logic_error("backward() called without an active tape");
  tape->backward(loss);
}

template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace dodnet
