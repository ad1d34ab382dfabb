#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Tensors are immutable values sharing storage by reference. Operations on
// tensors that require gradients are recorded on the tape active on the
// calling thread (see TapeScope); Tape::backward replays the recorded
// pullbacks in reverse order. The scalar type is a template parameter so the
// same graph can be re-run in double precision for gradient checking.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace physnet {

using Shape = std::vector<std::int64_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename S>
class Tape;

namespace detail {

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

template <typename S>
class BasicTensor {
 public:
  using Scalar = S;

  // A 0-d tensor holding 0.
  BasicTensor();
  BasicTensor(Shape shape, std::vector<S> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, S value, bool requires_grad = false);
  static BasicTensor scalar(S value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const S> data() const { return node_->data; }
  // In-place access for optimizers and initializers. Never used inside a
  // recorded graph.
  std::span<S> mutable_data() { return node_->data; }
  const S& operator[](std::size_t i) const { return node_->data[i]; }

  // Value of a single-element tensor.
  S item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  void set_requires_grad(bool on);

  // Deep copy as an independent leaf, optionally converting the scalar type.
  template <typename T>
  BasicTensor<T> cast() const {
    std::vector<T> out(node_->data.begin(), node_->data.end());
    return BasicTensor<T>(node_->shape, std::move(out), node_->requires_grad);
  }
  BasicTensor detach() const { return cast<S>(); }

  const detail::TensorNode<S>* id() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode<S>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode<S>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Gradient of a loss with respect to each leaf that required it.
template <typename S>
class Gradients {
 public:
  // Throws if the tensor is not a differentiable leaf of the graph.
  BasicTensor<S> of(const BasicTensor<S>& leaf) const;
  bool contains(const BasicTensor<S>& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape<S>;
  std::unordered_map<const detail::TensorNode<S>*, BasicTensor<S>> grads_;
};

template <typename S>
class Tape {
 public:
  // grad_in[i] is null when input i does not need a gradient; otherwise it is
  // a zero-initialised (or partially accumulated) buffer to add into.
  using Pullback = std::function<void(std::span<const S> grad_out, std::span<std::vector<S>* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const BasicTensor<S>& output, std::vector<BasicTensor<S>> inputs, Pullback pullback);

  // Reverse sweep from a single-element loss. A tape can be swept once; a
  // second call throws until reset().
  Gradients<S> backward(const BasicTensor<S>& loss);

  void reset();
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::shared_ptr<detail::TensorNode<S>> output;
    std::vector<std::shared_ptr<detail::TensorNode<S>>> inputs;
    Pullback pullback;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

// Makes a tape active for the current thread for the lifetime of the scope.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* previous_;
};

template <typename S>
Tape<S>* active_tape();

// Builds a fresh non-leaf result and records its pullback when any input
// requires a gradient and a tape is active. Used by every differentiable op.
template <typename S>
BasicTensor<S> make_result(Shape shape, std::vector<S> data);

template <typename S>
BasicTensor<S> record_op(BasicTensor<S> result, std::vector<BasicTensor<S>> inputs,
                         typename Tape<S>::Pullback pullback);

// ---------------------------------------------------------------------------
// Operations

enum class ElementwiseKind { Add, Sub, Mul, Relu, Sigmoid, Tanh, Scale };

// Binary kinds take `b`; Scale multiplies by `factor`. Binary kinds require
// identical shapes.
template <typename S>
BasicTensor<S> elementwise(ElementwiseKind kind, const BasicTensor<S>& a,
                           const std::optional<BasicTensor<S>>& b = std::nullopt, S factor = S(1));

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> tanh(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor);

// [m,k] x [k,n] -> [m,n]
template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b);

// Reductions to a 0-d tensor.
template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& a);

// Copying reshape; element count must match.
template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& a, Shape shape);

// [.., len, ..] sub-range along `axis` (copy).
template <typename S>
BasicTensor<S> slice(const BasicTensor<S>& a, std::size_t axis, std::int64_t start, std::int64_t length);

// Joins tensors along `axis`; all other extents must agree.
template <typename S>
BasicTensor<S> concat(const std::vector<BasicTensor<S>>& parts, std::size_t axis);

// Reverses the order of elements along `axis`.
template <typename S>
BasicTensor<S> flip(const BasicTensor<S>& a, std::size_t axis);

template <typename S>
BasicTensor<S> operator+(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return add(a, b);
}
template <typename S>
BasicTensor<S> operator-(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return sub(a, b);
}
template <typename S>
BasicTensor<S> operator*(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return mul(a, b);
}

}  // namespace physnet
