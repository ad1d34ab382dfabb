#include "physnet/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "physnet/errors.hpp"

namespace physnet {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
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

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

template <typename S>
S stable_sigmoid(S x) {
  if (x >= 0) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// BasicTensor

template <typename S>
BasicTensor<S>::BasicTensor() : node_(std::make_shared<detail::TensorNode<S>>()) {
  node_->data.assign(1, S(0));
}

template <typename S>
BasicTensor<S>::BasicTensor(Shape shape, std::vector<S> data, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode<S>>()) {
  check_shape(shape);
  if (numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename S>
BasicTensor<S> BasicTensor<S>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), S(0), requires_grad);
}

template <typename S>
BasicTensor<S> BasicTensor<S>::full(Shape shape, S value, bool requires_grad) {
  check_shape(shape);
  const auto n = numel(shape);
  return BasicTensor(std::move(shape), std::vector<S>(n, value), requires_grad);
}

template <typename S>
BasicTensor<S> BasicTensor<S>::scalar(S value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<S>{value}, requires_grad);
}

template <typename S>
S BasicTensor<S>::item() const {
  if (size() != 1) throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
  return node_->data[0];
}

template <typename S>
void BasicTensor<S>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw ValidationError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = on;
}

// ---------------------------------------------------------------------------
// Tape

template <typename S>
BasicTensor<S> Gradients<S>::of(const BasicTensor<S>& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) throw ValidationError("no gradient recorded for this tensor");
  return it->second;
}

template <typename S>
bool Gradients<S>::contains(const BasicTensor<S>& leaf) const {
  return grads_.count(leaf.id()) != 0;
}

template <typename S>
void Tape<S>::record(const BasicTensor<S>& output, std::vector<BasicTensor<S>> inputs, Pullback pullback) {
  if (consumed_) throw ValidationError("cannot record on a tape that was already swept; call reset()");
  Entry e;
  e.output = output.node();
  e.inputs.reserve(inputs.size());
  for (auto& in : inputs) e.inputs.push_back(in.node());
  e.pullback = std::move(pullback);
  entries_.push_back(std::move(e));
}

template <typename S>
Gradients<S> Tape<S>::backward(const BasicTensor<S>& loss) {
  if (consumed_) throw ValidationError("backward already ran on this tape; call reset() first");
  if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));

  std::unordered_map<const detail::TensorNode<S>*, std::vector<S>> grads;
  grads[loss.id()] = std::vector<S>(1, S(1));
  std::vector<std::shared_ptr<detail::TensorNode<S>>> leaves;

  std::vector<std::vector<S>*> slots;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto g = grads.find(it->output.get());
    if (g == grads.end()) continue;
    // Move the output gradient out so the map can rehash safely while the
    // input slots are created.
    std::vector<S> grad_out = std::move(g->second);
    grads.erase(g);

    slots.assign(it->inputs.size(), nullptr);
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const auto& in = it->inputs[i];
      if (!in->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(in.get());
      if (inserted) {
        slot->second.assign(in->data.size(), S(0));
        if (in->is_leaf) leaves.push_back(in);
      }
    }
    // Pointers are taken after all insertions for this entry.
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      if (it->inputs[i]->requires_grad) slots[i] = &grads.at(it->inputs[i].get());
    }
    it->pullback(grad_out, slots);
  }

  Gradients<S> result;
  for (const auto& leaf : leaves) {
    auto g = grads.find(leaf.get());
    result.grads_.emplace(leaf.get(), BasicTensor<S>(leaf->shape, std::move(g->second)));
  }
  // A loss that is itself a differentiable leaf.
  if (loss.is_leaf() && loss.requires_grad() && !result.grads_.count(loss.id())) {
    result.grads_.emplace(loss.id(), BasicTensor<S>(loss.shape(), std::vector<S>(1, S(1))));
  }
  entries_.clear();
  consumed_ = true;
  return result;
}

template <typename S>
void Tape<S>::reset() {
  entries_.clear();
  consumed_ = false;
}

template <typename S>
Tape<S>*& active_tape_slot() {
  thread_local Tape<S>* tape = nullptr;
  return tape;
}

template <typename S>
Tape<S>* active_tape() {
  return active_tape_slot<S>();
}

template <typename S>
TapeScope<S>::TapeScope(Tape<S>& tape) : previous_(active_tape_slot<S>()) {
  active_tape_slot<S>() = &tape;
}

template <typename S>
TapeScope<S>::~TapeScope() {
  active_tape_slot<S>() = previous_;
}

template <typename S>
BasicTensor<S> make_result(Shape shape, std::vector<S> data) {
  BasicTensor<S> t(std::move(shape), std::move(data));
  t.node()->is_leaf = false;
  return t;
}

template <typename S>
BasicTensor<S> record_op(BasicTensor<S> result, std::vector<BasicTensor<S>> inputs,
                         typename Tape<S>::Pullback pullback) {
  Tape<S>* tape = active_tape<S>();
  if (tape == nullptr) return result;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.requires_grad(); });
  if (!any) return result;
  result.node()->requires_grad = true;
  tape->record(result, std::move(inputs), std::move(pullback));
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
BasicTensor<S> elementwise(ElementwiseKind kind, const BasicTensor<S>& a, const std::optional<BasicTensor<S>>& b,
                           S factor) {
  const bool binary = kind == ElementwiseKind::Add || kind == ElementwiseKind::Sub || kind == ElementwiseKind::Mul;
  if (binary) {
    if (!b) throw ValidationError("binary elementwise op needs a second operand");
    if (a.shape() != b->shape()) {
      throw ShapeError("elementwise shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b->shape()));
    }
  }
  const auto x = a.data();
  const std::size_t n = x.size();
  std::vector<S> out(n);

  switch (kind) {
    case ElementwiseKind::Add: {
      const auto y = b->data();
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
      return record_op(make_result(a.shape(), std::move(out)), {a, *b}, [](auto go, auto gi) {
        for (auto* g : gi) {
          if (g)
            for (std::size_t i = 0; i < go.size(); ++i) (*g)[i] += go[i];
        }
      });
    }
    case ElementwiseKind::Sub: {
      const auto y = b->data();
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
      return record_op(make_result(a.shape(), std::move(out)), {a, *b}, [](auto go, auto gi) {
        if (gi[0])
          for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
        if (gi[1])
          for (std::size_t i = 0; i < go.size(); ++i) (*gi[1])[i] -= go[i];
      });
    }
    case ElementwiseKind::Mul: {
      const auto y = b->data();
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
      return record_op(make_result(a.shape(), std::move(out)), {a, *b}, [a, bb = *b](auto go, auto gi) {
        const auto xa = a.data();
        const auto xb = bb.data();
        if (gi[0])
          for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i] * xb[i];
        if (gi[1])
          for (std::size_t i = 0; i < go.size(); ++i) (*gi[1])[i] += go[i] * xa[i];
      });
    }
    case ElementwiseKind::Relu: {
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
      return record_op(make_result(a.shape(), std::move(out)), {a}, [a](auto go, auto gi) {
        const auto xa = a.data();
        for (std::size_t i = 0; i < go.size(); ++i)
          if (xa[i] > S(0)) (*gi[0])[i] += go[i];
      });
    }
    case ElementwiseKind::Sigmoid: {
      for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(x[i]);
      auto result = make_result(a.shape(), std::move(out));
      return record_op(result, {a}, [y = result.data()](auto go, auto gi) {
        for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i] * y[i] * (S(1) - y[i]);
      });
    }
    case ElementwiseKind::Tanh: {
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
      auto result = make_result(a.shape(), std::move(out));
      return record_op(result, {a}, [y = result.data()](auto go, auto gi) {
        for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i] * (S(1) - y[i] * y[i]);
      });
    }
    case ElementwiseKind::Scale: {
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * factor;
      return record_op(make_result(a.shape(), std::move(out)), {a}, [factor](auto go, auto gi) {
        for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i] * factor;
      });
    }
  }
  throw ValidationError("unknown elementwise kind");
}

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return elementwise(ElementwiseKind::Add, a, std::optional<BasicTensor<S>>(b));
}
template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return elementwise(ElementwiseKind::Sub, a, std::optional<BasicTensor<S>>(b));
}
template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return elementwise(ElementwiseKind::Mul, a, std::optional<BasicTensor<S>>(b));
}
template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& a) {
  return elementwise(ElementwiseKind::Relu, a);
}
template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& a) {
  return elementwise(ElementwiseKind::Sigmoid, a);
}
template <typename S>
BasicTensor<S> tanh(const BasicTensor<S>& a) {
  return elementwise(ElementwiseKind::Tanh, a);
}
template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor) {
  return elementwise<S>(ElementwiseKind::Scale, a, std::nullopt, factor);
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul needs 2-d operands, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<S> out(static_cast<std::size_t>(m * n));
  MatMap<S>(out.data(), m, n).noalias() = ConstMatMap<S>(a.data().data(), m, k) * ConstMatMap<S>(b.data().data(), k, n);
  return record_op(make_result(Shape{m, n}, std::move(out)), {a, b}, [a, b, m, k, n](auto go, auto gi) {
    ConstMatMap<S> dout(go.data(), m, n);
    if (gi[0]) MatMap<S>(gi[0]->data(), m, k).noalias() += dout * ConstMatMap<S>(b.data().data(), k, n).transpose();
    if (gi[1]) MatMap<S>(gi[1]->data(), k, n).noalias() += ConstMatMap<S>(a.data().data(), m, k).transpose() * dout;
  });
}

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a) {
  const auto x = a.data();
  const S total = std::accumulate(x.begin(), x.end(), S(0));
  return record_op(make_result(Shape{}, std::vector<S>{total}), {a}, [](auto go, auto gi) {
    for (auto& v : *gi[0]) v += go[0];
  });
}

template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

// ---------------------------------------------------------------------------
// Layout

template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& a, Shape shape) {
  check_shape(shape);
  if (numel(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  std::vector<S> out(a.data().begin(), a.data().end());
  return record_op(make_result(std::move(shape), std::move(out)), {a}, [](auto go, auto gi) {
    for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
  });
}

namespace {

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
  s.extent = static_cast<std::size_t>(shape[axis]);
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= static_cast<std::size_t>(shape[i]);
  return s;
}

}  // namespace

template <typename S>
BasicTensor<S> slice(const BasicTensor<S>& a, std::size_t axis, std::int64_t start, std::int64_t length) {
  if (axis >= a.rank()) throw ShapeError("slice axis out of range for " + to_string(a.shape()));
  if (start < 0 || length <= 0 || start + length > a.dim(axis)) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     to_string(a.shape()));
  }
  const auto sp = split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = length;
  const std::size_t len = static_cast<std::size_t>(length), off = static_cast<std::size_t>(start);
  std::vector<S> out(sp.outer * len * sp.inner);
  const auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.begin() + (o * sp.extent + off) * sp.inner, len * sp.inner, out.begin() + o * len * sp.inner);
  }
  return record_op(make_result(std::move(shape), std::move(out)), {a}, [sp, len, off](auto go, auto gi) {
    auto& g = *gi[0];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const S* src = go.data() + o * len * sp.inner;
      S* dst = g.data() + (o * sp.extent + off) * sp.inner;
      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename S>
BasicTensor<S> concat(const std::vector<BasicTensor<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat needs at least one tensor");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range for " + to_string(ref));
  Shape shape = ref;
  shape[axis] = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat rank mismatch: " + to_string(p.shape()) + " vs " + to_string(ref));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) {
        throw ShapeError("concat extent mismatch: " + to_string(p.shape()) + " vs " + to_string(ref));
      }
    }
    offsets.push_back(static_cast<std::size_t>(shape[axis]));
    shape[axis] += p.dim(axis);
  }
  const auto sp = split_axis(shape, axis);
  std::vector<S> out(numel(shape));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto ext = static_cast<std::size_t>(parts[k].dim(axis));
    const auto x = parts[k].data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(x.begin() + o * ext * sp.inner, ext * sp.inner, out.begin() + (o * sp.extent + offsets[k]) * sp.inner);
    }
  }
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(static_cast<std::size_t>(p.dim(axis)));
  return record_op(make_result(std::move(shape), std::move(out)), parts, [sp, offsets, extents](auto go, auto gi) {
    for (std::size_t k = 0; k < gi.size(); ++k) {
      if (!gi[k]) continue;
      auto& g = *gi[k];
      const std::size_t ext = extents[k];
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const S* src = go.data() + (o * sp.extent + offsets[k]) * sp.inner;
        S* dst = g.data() + o * ext * sp.inner;
        for (std::size_t i = 0; i < ext * sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename S>
BasicTensor<S> flip(const BasicTensor<S>& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("flip axis out of range for " + to_string(a.shape()));
  const auto sp = split_axis(a.shape(), axis);
  const auto x = a.data();
  std::vector<S> out(x.size());
  auto index = [sp](std::size_t o, std::size_t e) { return (o * sp.extent + e) * sp.inner; };
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      std::copy_n(x.begin() + index(o, e), sp.inner, out.begin() + index(o, sp.extent - 1 - e));
  return record_op(make_result(a.shape(), std::move(out)), {a}, [sp, index](auto go, auto gi) {
    auto& g = *gi[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i) g[index(o, sp.extent - 1 - e) + i] += go[index(o, e) + i];
  });
}

// ---------------------------------------------------------------------------

#define PHYSNET_INSTANTIATE_TENSOR(S)                                                                              \
  template class BasicTensor<S>;                                                                                   \
  template class Gradients<S>;                                                                                     \
  template class Tape<S>;                                                                                          \
  template class TapeScope<S>;                                                                                     \
  template Tape<S>* active_tape<S>();                                                                              \
  template BasicTensor<S> make_result<S>(Shape, std::vector<S>);                                                   \
  template BasicTensor<S> record_op<S>(BasicTensor<S>, std::vector<BasicTensor<S>>, Tape<S>::Pullback);            \
  template BasicTensor<S> elementwise<S>(ElementwiseKind, const BasicTensor<S>&,                                   \
                                         const std::optional<BasicTensor<S>>&, S);                                 \
  template BasicTensor<S> add<S>(const BasicTensor<S>&, const BasicTensor<S>&);                                    \
  template BasicTensor<S> sub<S>(const BasicTensor<S>&, const BasicTensor<S>&);                                    \
  template BasicTensor<S> mul<S>(const BasicTensor<S>&, const BasicTensor<S>&);                                    \
  template BasicTensor<S> relu<S>(const BasicTensor<S>&);                                                          \
  template BasicTensor<S> sigmoid<S>(const BasicTensor<S>&);                                                       \
  template BasicTensor<S> tanh<S>(const BasicTensor<S>&);                                                          \
  template BasicTensor<S> scale<S>(const BasicTensor<S>&, S);                                                      \
  template BasicTensor<S> matmul<S>(const BasicTensor<S>&, const BasicTensor<S>&);                                 \
  template BasicTensor<S> sum<S>(const BasicTensor<S>&);                                                           \
  template BasicTensor<S> mean<S>(const BasicTensor<S>&);                                                          \
  template BasicTensor<S> reshape<S>(const BasicTensor<S>&, Shape);                                                \
  template BasicTensor<S> slice<S>(const BasicTensor<S>&, std::size_t, std::int64_t, std::int64_t);                \
  template BasicTensor<S> concat<S>(const std::vector<BasicTensor<S>>&, std::size_t);                              \
  template BasicTensor<S> flip<S>(const BasicTensor<S>&, std::size_t);

PHYSNET_INSTANTIATE_TENSOR(float)
PHYSNET_INSTANTIATE_TENSOR(double)

}  // namespace physnet
