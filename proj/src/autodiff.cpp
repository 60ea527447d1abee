#include "catlab/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace catlab::ad {

namespace {

std::atomic<NodeId> g_next_id{1};

NodeId next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

using detail::BackwardFn;
using detail::Node;

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->op = op;
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool tracked = false;
  for (const Tensor* t : inputs) tracked = tracked || t->requires_grad();
  if (tracked) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, std::string_view why) {
  throw ShapeError(std::string(op) + ": " + std::string(why) + ", got " + to_string(a));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Output shape of an elementwise op with trailing-suffix repetition.
Shape broadcast_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  shape_fail(op, a, b);
}

std::size_t last_dim(std::string_view op, const Tensor& a) {
  if (a.rank() == 0) shape_fail(op, a.shape(), "needs rank >= 1");
  return a.shape().back();
}

// C[n,m] += A[n,k] * B[k,m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[n,k] += G[n,m] * B[k,m]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* grow = g + i * m;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k,m] += A[n,k]^T * G[n,m]
void gemm_tn(const double* a, const double* g, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * grow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(std::string_view op, const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto in_node = a.node();
  return make_result(op, a.shape(), std::move(out), {&a},
                     [in_node, deriv](std::span<const double> g,
                                      std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       const auto& x = in_node->values;
                       auto& dx = *gi[0];
                       for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * deriv(x[i]);
                     });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (ad::numel(shape) != values.size()) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                     to_string(shape));
  }
  node_ = std::make_shared<Node>();
  node_->id = next_id();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(ad::numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

std::size_t Tensor::dim(std::ptrdiff_t axis) const {
  const auto r = static_cast<std::ptrdiff_t>(rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("dim: axis out of range for " + to_string(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw std::logic_error("mutable_values: tensor is not a leaf");
  return node_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has shape " + to_string(shape()));
  return node_->values[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad: tensor is not a leaf");
  node_->requires_grad = flag;
  return *this;
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->values, requires_grad);
}

const Tensor& Gradients::operator[](const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) throw std::out_of_range("gradients: no gradient for this tensor");
  return it->second;
}

namespace {

// Reachable tracked nodes, sorted by increasing id.
std::vector<Node*> collect(const Tensor& root) {
  std::vector<Node*> order;
  if (!root.requires_grad()) return order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id < b->id; });
  return order;
}

}  // namespace

std::vector<TapeEntry> tape_of(const Tensor& root) {
  std::vector<TapeEntry> out;
  for (Node* n : collect(root)) {
    if (!n->backward) continue;
    TapeEntry e{n->id, n->op, {}};
    for (const auto& in : n->inputs) e.inputs.push_back(in->id);
    out.push_back(std::move(e));
  }
  return out;
}

Gradients backward(const Tensor& loss, std::span<const Tensor> wrt) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  Gradients result;
  const auto order = collect(loss);
  if (order.empty()) return result;

  std::unordered_set<Node*> targets;
  for (const auto& t : wrt) targets.insert(t.node().get());

  // A node needs a gradient when a wanted leaf lies upstream of it.
  std::unordered_map<Node*, bool> needs;
  needs.reserve(order.size());
  for (Node* n : order) {
    bool want = false;
    if (!n->backward) {
      want = targets.empty() || targets.contains(n);
    } else {
      for (const auto& in : n->inputs) {
        auto it = needs.find(in.get());
        if (it != needs.end() && it->second) {
          want = true;
          break;
        }
      }
    }
    needs[n] = want;
  }

  std::unordered_map<Node*, std::vector<double>> grads;
  grads[order.back()] = std::vector<double>{1.0};

  std::vector<std::vector<double>*> buffers;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || !needs[n]) continue;
    auto git = grads.find(n);
    if (git == grads.end()) continue;
    std::vector<double> g = std::move(git->second);
    grads.erase(git);
    buffers.assign(n->inputs.size(), nullptr);
    for (std::size_t k = 0; k < n->inputs.size(); ++k) {
      Node* in = n->inputs[k].get();
      if (!in->requires_grad || !needs[in]) continue;
      auto& buf = grads[in];
      if (buf.empty()) buf.assign(in->values.size(), 0.0);
      buffers[k] = &buf;
    }
    n->backward(g, buffers);
  }

  for (Node* n : order) {
    if (n->backward || !needs[n]) continue;
    auto git = grads.find(n);
    std::vector<double> g =
        git == grads.end() ? std::vector<double>(n->values.size(), 0.0) : std::move(git->second);
    result.insert(n->id, Tensor(n->shape, std::move(g)));
  }
  return result;
}

Tensor finite_difference_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                              double step) {
  std::vector<double> grad(x.numel());
  std::vector<double> probe(x.values().begin(), x.values().end());
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + step;
    const double up = f(Tensor(x.shape(), probe)).item();
    probe[k] = orig - step;
    const double down = f(Tensor(x.shape(), probe)).item();
    probe[k] = orig;
    grad[k] = (up - down) / (2.0 * step);
  }
  return Tensor(x.shape(), std::move(grad));
}

// ---------------------------------------------------------------------------
// Elementwise binary

namespace {

template <typename Fwd, typename Da, typename Db>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  const std::size_t n = numel(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i % na], bv[i % nb]);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result(op, std::move(out_shape), std::move(out), {&a, &b},
                     [an, bn, na, nb, da, db](std::span<const double> g,
                                              std::span<std::vector<double>*> gi) {
                       const auto& x = an->values;
                       const auto& y = bn->values;
                       if (gi[0]) {
                         auto& gx = *gi[0];
                         for (std::size_t i = 0; i < g.size(); ++i)
                           gx[i % na] += g[i] * da(x[i % na], y[i % nb]);
                       }
                       if (gi[1]) {
                         auto& gy = *gi[1];
                         for (std::size_t i = 0; i < g.size(); ++i)
                           gy[i % nb] += g[i] * db(x[i % na], y[i % nb]);
                       }
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor mul_prefix(const Tensor& x, const Tensor& w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() > xs.size() || !std::equal(ws.begin(), ws.end(), xs.begin())) {
    shape_fail("mul_prefix", xs, ws);
  }
  const std::size_t outer = w.numel();
  const std::size_t inner = outer == 0 ? 0 : x.numel() / outer;
  std::vector<double> out(x.numel());
  auto xv = x.values();
  auto wv = w.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xv[o * inner + i] * wv[o];
  auto xn = x.node();
  auto wn = w.node();
  return make_result("mul_prefix", xs, std::move(out), {&x, &w},
                     [xn, wn, outer, inner](std::span<const double> g,
                                            std::span<std::vector<double>*> gi) {
                       if (gi[0]) {
                         auto& gx = *gi[0];
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t i = 0; i < inner; ++i)
                             gx[o * inner + i] += g[o * inner + i] * wn->values[o];
                       }
                       if (gi[1]) {
                         auto& gw = *gi[1];
                         for (std::size_t o = 0; o < outer; ++o) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < inner; ++i)
                             acc += g[o * inner + i] * xn->values[o * inner + i];
                           gw[o] += acc;
                         }
                       }
                     });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double shift) {
  return unary(
      "add_scalar", a, [shift](double x) { return x + shift; }, [](double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t n = a.dim(-2);
  const std::size_t k = a.dim(-1);
  if (b.dim(-2) != k) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = b.dim(-1);
  const bool shared_rhs = b.rank() == 2;
  if (!shared_rhs) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      shape_fail("matmul", a.shape(), b.shape());
    }
  }
  const std::size_t batch = a.numel() / (n * k == 0 ? 1 : n * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(m);
  std::vector<double> out(numel(out_shape), 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  if (shared_rhs) {
    gemm_nn(av, bv, out.data(), batch * n, k, m);
  } else {
    for (std::size_t s = 0; s < batch; ++s)
      gemm_nn(av + s * n * k, bv + s * k * m, out.data() + s * n * m, n, k, m);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result(
      "matmul", std::move(out_shape), std::move(out), {&a, &b},
      [an, bn, batch, n, k, m, shared_rhs](std::span<const double> g,
                                           std::span<std::vector<double>*> gi) {
        const double* av = an->values.data();
        const double* bv = bn->values.data();
        if (shared_rhs) {
          if (gi[0]) gemm_nt(g.data(), bv, gi[0]->data(), batch * n, k, m);
          if (gi[1]) gemm_tn(av, g.data(), gi[1]->data(), batch * n, k, m);
          return;
        }
        for (std::size_t s = 0; s < batch; ++s) {
          const double* gs = g.data() + s * n * m;
          if (gi[0]) gemm_nt(gs, bv + s * k * m, gi[0]->data() + s * n * k, n, k, m);
          if (gi[1]) gemm_tn(av + s * n * k, gs, gi[1]->data() + s * k * m, n, k, m);
        }
      });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) shape_fail("permute", a.shape(), "axis list length differs from rank");
  std::vector<bool> used(r, false);
  for (auto ax : axes) {
    if (ax >= r || used[ax]) shape_fail("permute", a.shape(), "axes are not a permutation");
    used[ax] = true;
  }
  const Shape& in_shape = a.shape();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];

  // source index for every output position
  const std::size_t total = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < r; ++i) idx += counter[i] * in_strides[axes[i]];
    (*src)[flat] = idx;
    for (std::size_t i = r; i-- > 0;) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  std::vector<double> out(total);
  auto av = a.values();
  for (std::size_t i = 0; i < total; ++i) out[i] = av[(*src)[i]];
  return make_result("permute", std::move(out_shape), std::move(out), {&a},
                     [src](std::span<const double> g, std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       for (std::size_t i = 0; i < g.size(); ++i) ga[(*src)[i]] += g[i];
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) shape_fail("transpose", a.shape(), "needs rank >= 2");
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {&a},
                     [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

Tensor softmax(const Tensor& a) {
  const std::size_t d = last_dim("softmax", a);
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double* y = out.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  auto y_saved = std::make_shared<std::vector<double>>(out);
  return make_result("softmax", a.shape(), std::move(out), {&a},
                     [y_saved, rows, d](std::span<const double> g,
                                        std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       const auto& y = *y_saved;
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                         for (std::size_t j = 0; j < d; ++j)
                           ga[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
                       }
                     });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t d = last_dim("log_softmax", a);
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[j] - lse;
  }
  auto y_saved = std::make_shared<std::vector<double>>(out);
  return make_result("log_softmax", a.shape(), std::move(out), {&a},
                     [y_saved, rows, d](std::span<const double> g,
                                        std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       const auto& y = *y_saved;
                       for (std::size_t r = 0; r < rows; ++r) {
                         double gs = 0.0;
                         for (std::size_t j = 0; j < d; ++j) gs += g[r * d + j];
                         for (std::size_t j = 0; j < d; ++j)
                           ga[r * d + j] += g[r * d + j] - std::exp(y[r * d + j]) * gs;
                       }
                     });
}

Tensor layer_norm(const Tensor& a, double eps) {
  const std::size_t d = last_dim("layer_norm", a);
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  std::vector<double> out(a.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (x[j] - mu) * is;
  }
  auto y_saved = std::make_shared<std::vector<double>>(out);
  return make_result(
      "layer_norm", a.shape(), std::move(out), {&a},
      [y_saved, inv_std, rows, d](std::span<const double> g, std::span<std::vector<double>*> gi) {
        if (!gi[0]) return;
        auto& ga = *gi[0];
        const auto& y = *y_saved;
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double gm = 0.0;
          double gy = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            gm += g[r * d + j];
            gy += g[r * d + j] * y[r * d + j];
          }
          gm /= dd;
          gy /= dd;
          for (std::size_t j = 0; j < d; ++j)
            ga[r * d + j] += (*inv_std)[r] * (g[r * d + j] - gm - y[r * d + j] * gy);
        }
      });
}

// ---------------------------------------------------------------------------
// Pointwise

Tensor gelu(const Tensor& a) {
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2)); },
      [](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2));
        const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        return cdf + x * pdf;
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow(const Tensor& a, double exponent) {
  return unary(
      "pow", a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x) { return exponent * std::pow(x, exponent - 1.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_result("sum", Shape{}, {acc}, {&a},
                     [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       for (double& v : *gi[0]) v += g[0];
                     });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) shape_fail("mean", a.shape(), "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last(const Tensor& a) {
  const std::size_t d = last_dim("sum_last", a);
  const std::size_t rows = d == 0 ? 0 : a.numel() / d;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> out(rows, 0.0);
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r] += av[r * d + j];
  return make_result("sum_last", std::move(out_shape), std::move(out), {&a},
                     [rows, d](std::span<const double> g, std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += g[r];
                     });
}

Tensor mean_last(const Tensor& a) {
  const std::size_t d = last_dim("mean_last", a);
  if (d == 0) shape_fail("mean_last", a.shape(), "empty last axis");
  return scale(sum_last(a), 1.0 / static_cast<double>(d));
}

// ---------------------------------------------------------------------------
// Indexing

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  if (table.rank() != 2) shape_fail("gather_rows", table.shape(), "table must be rank 2");
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  std::vector<double> out(idx->size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::size_t r = (*idx)[i];
    if (r >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(r) + " outside table of " +
                              std::to_string(rows) + " rows");
    }
    std::copy_n(tv.data() + r * d, d, out.data() + i * d);
  }
  return make_result("gather_rows", Shape{idx->size(), d}, std::move(out), {&table},
                     [idx, d](std::span<const double> g, std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       auto& gt = *gi[0];
                       for (std::size_t i = 0; i < idx->size(); ++i)
                         for (std::size_t j = 0; j < d; ++j) gt[(*idx)[i] * d + j] += g[i * d + j];
                     });
}

Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, double value) {
  if (mask.size() != a.numel()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) +
                     " entries for shape " + to_string(a.shape()));
  }
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if ((*m)[i]) out[i] = value;
  return make_result("masked_fill", a.shape(), std::move(out), {&a},
                     [m](std::span<const double> g, std::span<std::vector<double>*> gi) {
                       if (!gi[0]) return;
                       auto& ga = *gi[0];
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (!(*m)[i]) ga[i] += g[i];
                     });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_fail("concat", first, "axis out of range");
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) shape_fail("concat", first, s);
    out_shape[axis] += s[axis];
    widths.push_back(s[axis] * inner);
  }
  const std::size_t row = out_shape[axis] * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }

  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->op = "concat";
  node->shape = std::move(out_shape);
  node->values = std::move(out);
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || p.requires_grad();
  if (tracked) {
    node->requires_grad = true;
    for (const auto& p : parts) node->inputs.push_back(p.node());
    node->backward = [widths, outer, row](std::span<const double> g,
                                          std::span<std::vector<double>*> gi) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        if (gi[k]) {
          auto& gk = *gi[k];
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < widths[k]; ++j)
              gk[o * widths[k] + j] += g[o * row + off + j];
        }
        off += widths[k];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor detach(const Tensor& a) { return Tensor(a.shape(), {a.values().begin(), a.values().end()}); }

}  // namespace catlab::ad
