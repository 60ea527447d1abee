#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// Every op returns a new Tensor. When any input requires a gradient the
// result keeps references to its inputs together with a backward closure;
// the set of such records reachable from a loss forms the tape. Node ids are
// drawn from a monotone counter, so sorting by id gives a topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace catlab::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::uint64_t;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node;

// Receives the output gradient and one accumulation buffer per input. A null
// buffer means that input does not need a gradient on this pass.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

struct Node {
  NodeId id = 0;
  std::string_view op = "leaf";
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->values.size(); }
  std::size_t dim(std::ptrdiff_t axis) const;

  std::span<const double> values() const { return node_->values; }
  // Writable access is restricted to leaves; interior nodes are immutable.
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t flat) const { return node_->values[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  // Only meaningful on leaves.
  Tensor& set_requires_grad(bool flag);
  NodeId id() const { return node_->id; }
  std::string_view op() const { return node_->op; }

  // Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Gradients of one backward pass, keyed by leaf node id.
class Gradients {
 public:
  bool contains(const Tensor& leaf) const { return grads_.contains(leaf.id()); }
  const Tensor& operator[](const Tensor& leaf) const;
  const std::map<NodeId, Tensor>& all() const { return grads_; }
  void insert(NodeId id, Tensor grad) { grads_.insert_or_assign(id, std::move(grad)); }

 private:
  std::map<NodeId, Tensor> grads_;
};

struct TapeEntry {
  NodeId output;
  std::string_view op;
  std::vector<NodeId> inputs;
};

/// Recorded applications reachable from `root`, in increasing id order.
std::vector<TapeEntry> tape_of(const Tensor& root);

/// Reverse sweep from a scalar loss, seeded with 1. When `wrt` is non-empty,
/// only those leaves receive gradients and untouched branches are skipped.
Gradients backward(const Tensor& loss, std::span<const Tensor> wrt = {});

/// Central-difference estimate of d f / d x, one coordinate at a time.
Tensor finite_difference_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                              double step);

// Elementwise binary ops. The second operand may also have a shape equal to
// a trailing suffix of the first (or vice versa); it is repeated over the
// leading dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
// `w` has a shape equal to a leading prefix of `x`'s shape; each w entry
// scales the corresponding trailing block of x.
Tensor mul_prefix(const Tensor& x, const Tensor& w);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double shift);

// (..., n, k) x (k, m) or (..., n, k) x (..., k, m) with equal leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // swaps the last two axes
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& a);      // over the last axis
Tensor log_softmax(const Tensor& a);  // over the last axis
Tensor layer_norm(const Tensor& a, double eps = 1e-5);  // last axis, no affine
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);

Tensor sum(const Tensor& a);        // -> scalar
Tensor mean(const Tensor& a);       // -> scalar
Tensor sum_last(const Tensor& a);   // drops the last axis
Tensor mean_last(const Tensor& a);  // drops the last axis

// Rows of a (V, D) table -> (indices.size(), D).
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
// Positions where mask != 0 are replaced with `value` and get zero gradient.
Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, double value);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor detach(const Tensor& a);

}  // namespace catlab::ad
