#pragma once

// Tape-based reverse-mode differentiation over the kernel set.
//
// A Tape records every op with its value and a closure that maps the op's output
// gradient onto its inputs. Node ids are append-only, so inputs always precede the
// node that consumes them and a single reverse sweep is a valid topological order.

#include "caf/conv_spec.hpp"
#include "caf/kernels.hpp"
#include "caf/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace caf {

template <typename Scalar>
class Tape;

/// Handle to a node on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  Index id = -1;

  const Tensor4<Scalar>& value() const { return tape->value(id); }
  const Shape4& shape() const { return value().shape(); }
};

/// d(loss)/d(node) for every node of a tape; each gradient has its node's shape.
template <typename Scalar>
class GradStore {
 public:
  explicit GradStore(std::vector<Tensor4<Scalar>> grads) : grads_(std::move(grads)) {}

  const Tensor4<Scalar>& operator[](Var<Scalar> v) const { return at(v.id); }
  const Tensor4<Scalar>& at(Index id) const { return grads_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor4<Scalar>> grads_;
};

template <typename Scalar>
class Tape {
 public:
  /// Receives input gradients from a node's backward closure; accumulates on fan-out.
  class Sink {
   public:
    explicit Sink(std::vector<std::optional<Tensor4<Scalar>>>& slots, const Tape& tape) : slots_(slots), tape_(tape) {}

    void add(Index id, Tensor4<Scalar> grad) {
      auto& slot = slots_[static_cast<std::size_t>(id)];
      if (grad.shape() != tape_.value(id).shape()) {
        throw ShapeError("backward: gradient shape " + to_string(grad.shape()) + " != value shape " +
                         to_string(tape_.value(id).shape()) + " for node '" + std::string(tape_.kind(id)) + "'");
      }
      if (slot) {
        slot->array() += grad.array();
      } else {
        slot = std::move(grad);
      }
    }

   private:
    std::vector<std::optional<Tensor4<Scalar>>>& slots_;
    const Tape& tape_;
  };

  using BackwardFn = std::function<void(const Tensor4<Scalar>& grad_out, Sink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(Tensor4<Scalar> value) { return push("leaf", std::move(value), {}, nullptr); }

  /// Leaf bound to external parameter storage. Binding the same storage twice
  /// returns the same node, so gradients of shared parameters accumulate.
  Var<Scalar> param(const Tensor4<Scalar>& storage) {
    if (auto it = params_.find(&storage); it != params_.end()) return {this, it->second};
    Var<Scalar> v = push("param", storage, {}, nullptr);
    params_.emplace(&storage, v.id);
    return v;
  }

  std::optional<Var<Scalar>> find_param(const Tensor4<Scalar>& storage) const {
    if (auto it = params_.find(&storage); it != params_.end()) return Var<Scalar>{const_cast<Tape*>(this), it->second};
    return std::nullopt;
  }

  Var<Scalar> record(std::string_view kind, Tensor4<Scalar> value, std::vector<Index> inputs, BackwardFn backward) {
    for (Index in : inputs) {
      if (in < 0 || in >= static_cast<Index>(nodes_.size())) throw std::logic_error("Tape::record: dangling input id");
    }
    return push(kind, std::move(value), std::move(inputs), std::move(backward));
  }

  const Tensor4<Scalar>& value(Index id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  std::string_view kind(Index id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }
  const std::vector<Index>& inputs(Index id) const { return nodes_.at(static_cast<std::size_t>(id)).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Piecewise ops (ReLU, L1) append which side of their kink each element took.
  void note_branches(const std::vector<std::uint8_t>& bits) {
    branches_.insert(branches_.end(), bits.begin(), bits.end());
  }
  const std::vector<std::uint8_t>& branch_pattern() const { return branches_; }

  GradStore<Scalar> backward(Var<Scalar> loss) {
    if (nodes_.empty()) throw std::logic_error("backward: empty tape");
    if (loss.tape != this) throw std::logic_error("backward: loss belongs to another tape");
    if (consumed_) throw std::logic_error("backward: tape already differentiated");
    if (loss.value().size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
    }
    consumed_ = true;

    std::vector<std::optional<Tensor4<Scalar>>> slots(nodes_.size());
    slots[static_cast<std::size_t>(loss.id)] = Tensor4<Scalar>::constant(loss.shape(), Scalar(1));
    Sink sink(slots, *this);
    for (Index i = loss.id; i >= 0; --i) {
      const auto& node = nodes_[static_cast<std::size_t>(i)];
      const auto& g = slots[static_cast<std::size_t>(i)];
      if (g && node.backward) node.backward(*g, sink);
    }

    std::vector<Tensor4<Scalar>> grads;
    grads.reserve(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      grads.push_back(slots[i] ? std::move(*slots[i]) : Tensor4<Scalar>(nodes_[i].value.shape()));
    }
    return GradStore<Scalar>(std::move(grads));
  }

 private:
  struct Node {
    std::string_view kind;
    Tensor4<Scalar> value;
    std::vector<Index> inputs;
    BackwardFn backward;
  };

  Var<Scalar> push(std::string_view kind, Tensor4<Scalar> value, std::vector<Index> inputs, BackwardFn backward) {
    if (consumed_) throw std::logic_error("Tape: cannot record after backward");
    nodes_.push_back(Node{kind, std::move(value), std::move(inputs), std::move(backward)});
    return {this, static_cast<Index>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor4<Scalar>*, Index> params_;
  std::vector<std::uint8_t> branches_;
  bool consumed_ = false;
};

// Differentiable ops. Each mirrors the kernel of the same name.

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, std::optional<Var<Scalar>> bias, const ConvGeometry& geom);

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, const ConvSpec<Scalar>& spec);

template <typename Scalar>
Var<Scalar> conv3d_singleton(Var<Scalar> x, Var<Scalar> weight, std::optional<Var<Scalar>> bias,
                             const Conv3Geometry& geom);

template <typename Scalar>
Var<Scalar> conv3d_singleton(Var<Scalar> x, const Conv3Spec<Scalar>& spec);

template <typename Scalar>
Var<Scalar> channel_shuffle(Var<Scalar> x, Index groups);

template <typename Scalar>
Var<Scalar> softmax_lastdim(Var<Scalar> x);

template <typename Scalar>
Var<Scalar> layer_norm_channels(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps);

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x);

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b);

/// Elementwise product.
template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b);

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);

template <typename Scalar>
Var<Scalar> transpose_last2(Var<Scalar> x);

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, const Shape4& shape);

template <typename Scalar>
Var<Scalar> slice_channels(Var<Scalar> x, Index begin, Index count);

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar k);

/// x * s for a single-element s.
template <typename Scalar>
Var<Scalar> scale_by(Var<Scalar> x, Var<Scalar> s);

template <typename Scalar>
Var<Scalar> exp(Var<Scalar> x);

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x);

/// sum(x * weights) with constant weights: a scalar projection used as a test loss.
template <typename Scalar>
Var<Scalar> dot(Var<Scalar> x, const Tensor4<Scalar>& weights);

}  // namespace caf
