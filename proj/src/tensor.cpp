#include "bmds/tensor.hpp"

#include "bmds/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace bmds {

using detail::Node;
using detail::NodePtr;

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
  }
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Wraps a freshly computed value; attaches `backward` only when some input
// participates in the graph.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto node = make_leaf(std::move(shape), std::move(data), false);
  if (any_requires_grad(inputs)) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) {
      if (t->defined()) node->parents.push_back(t->node());
    }
    node->backward = std::move(backward);
  }
  return Tensor(node);
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
  auto node = make_leaf(std::move(shape), std::move(data), false);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(node);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

// --- elementwise helpers --------------------------------------------------

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd dydx) {
  require_defined(a, "unary op");
  const auto& x = a.node()->data;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  NodePtr an = a.node();
  return make_result(a.shape(), std::move(y), {&a}, [an, dydx](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * dydx(an->data[i], self.data[i]);
    }
  });
}

struct Broadcast {
  Shape shape;
  bool a_scalar;
  bool b_scalar;
};

Broadcast broadcast_shapes(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return {a.shape(), false, false};
  if (b.numel() == 1) return {a.shape(), false, true};
  if (a.numel() == 1) return {b.shape(), true, false};
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
}

// `kind`: 0 add, 1 sub, 2 mul, 3 div.
Tensor binary(const Tensor& a, const Tensor& b, int kind, const char* name) {
  const Broadcast bc = broadcast_shapes(a, b, name);
  const auto n = static_cast<std::size_t>(numel_of(bc.shape));
  const auto& xa = a.node()->data;
  const auto& xb = b.node()->data;
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = xa[bc.a_scalar ? 0 : i];
    const double v = xb[bc.b_scalar ? 0 : i];
    switch (kind) {
      case 0: y[i] = u + v; break;
      case 1: y[i] = u - v; break;
      case 2: y[i] = u * v; break;
      default: y[i] = u / v; break;
    }
  }
  NodePtr an = a.node(), bn = b.node();
  return make_result(bc.shape, std::move(y), {&a, &b}, [an, bn, bc, kind](Node& self) {
    const std::size_t n = self.grad.size();
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double d = self.grad[i];
        const double v = bn->data[bc.b_scalar ? 0 : i];
        if (kind == 2) d *= v;
        if (kind == 3) d /= v;
        g[bc.a_scalar ? 0 : i] += d;
      }
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double d = self.grad[i];
        const double u = an->data[bc.a_scalar ? 0 : i];
        const double v = bn->data[bc.b_scalar ? 0 : i];
        if (kind == 1) d = -d;
        if (kind == 2) d *= u;
        if (kind == 3) d *= -u / (v * v);
        g[bc.b_scalar ? 0 : i] += d;
      }
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

std::vector<bool> axis_mask(std::size_t ndim, const std::vector<std::size_t>& axes,
                            const char* op) {
  if (axes.empty()) throw std::invalid_argument(std::string(op) + ": empty reduction axis list");
  std::vector<bool> mask(ndim, false);
  for (auto ax : axes) {
    if (ax >= ndim) {
      throw DimensionError(std::string(op) + ": axis " + std::to_string(ax) +
                           " out of range for rank " + std::to_string(ndim));
    }
    mask[ax] = true;
  }
  return mask;
}

// Maps every flat input index to its flat index in the reduced output.
std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<bool>& mask,
                                       Shape& out_shape) {
  out_shape.clear();
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (!mask[d]) out_shape.push_back(shape[d]);
  }
  const auto n = static_cast<std::size_t>(numel_of(shape));
  std::vector<std::size_t> map(n);
  std::vector<std::int64_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (!mask[d]) o = o * static_cast<std::size_t>(shape[d]) + static_cast<std::size_t>(idx[d]);
    }
    map[i] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

void require_rank5(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.ndim() != 5) {
    throw DimensionError(std::string(op) + ": expected [B,C,H,W,D], got " + shape_str(t.shape()));
  }
}

}  // namespace

// --- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  const auto n = numel_of(shape);
  node_ = make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), fill),
                    requires_grad);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(make_leaf(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::int64_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape().size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  }
  return node_->shape[axis];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->data.size()); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  require_defined(*this, "set_requires_grad");
  if (!node_->is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return Tensor(node_->shape, node_->data, false);
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) {
    throw DimensionError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) {
    throw std::logic_error("backward(): loss does not depend on any tensor requiring grad");
  }

  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
  }
  // Intermediate gradients are scratch space.
  for (Node* n : order) {
    if (!n->is_leaf()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// --- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, 0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, 1, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, 2, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, 3, "div"); }

Tensor scalar_mul(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
  return unary(a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  require_defined(a, "sqrt");
  for (double v : a.data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

// --- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  NodePtr an = a.node();
  return make_result(Shape{}, {s}, {&a}, [an](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  return scalar_mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes) {
  require_defined(a, "sum");
  const auto mask = axis_mask(a.ndim(), axes, "sum");
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(reduction_map(a.shape(), mask, out_shape));
  std::vector<double> y(static_cast<std::size_t>(numel_of(out_shape)), 0.0);
  const auto& x = a.node()->data;
  for (std::size_t i = 0; i < x.size(); ++i) y[(*map)[i]] += x[i];
  NodePtr an = a.node();
  return make_result(out_shape, std::move(y), {&a}, [an, map](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[(*map)[i]];
  });
}

Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes) {
  const auto s = sum(a, axes);
  if (s.numel() == 0 || a.numel() == 0) throw std::invalid_argument("mean over empty tensor");
  return scalar_mul(s, static_cast<double>(s.numel()) / static_cast<double>(a.numel()));
}

Tensor var(const Tensor& a, const std::vector<std::size_t>& axes) {
  require_defined(a, "var");
  const auto mask = axis_mask(a.ndim(), axes, "var");
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(reduction_map(a.shape(), mask, out_shape));
  const auto m = static_cast<std::size_t>(numel_of(out_shape));
  const double count = static_cast<double>(a.numel()) / static_cast<double>(std::max<std::size_t>(m, 1));
  const auto& x = a.node()->data;
  auto mu = std::make_shared<std::vector<double>>(m, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) (*mu)[(*map)[i]] += x[i];
  for (auto& v : *mu) v /= count;
  std::vector<double> y(m, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - (*mu)[(*map)[i]];
    y[(*map)[i]] += d * d;
  }
  for (auto& v : y) v /= count;
  NodePtr an = a.node();
  return make_result(out_shape, std::move(y), {&a}, [an, map, mu, count](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t o = (*map)[i];
      g[i] += self.grad[o] * 2.0 * (an->data[i] - (*mu)[o]) / count;
    }
  });
}

// --- channel ops ----------------------------------------------------------

namespace {

struct ChannelLayout {
  std::int64_t batch;
  std::int64_t channels;
  std::int64_t inner;
};

ChannelLayout channel_layout(const Tensor& x, const char* op) {
  require_defined(x, op);
  if (x.ndim() < 2) {
    throw DimensionError(std::string(op) + ": expected [B,C,...], got " + shape_str(x.shape()));
  }
  const std::int64_t inner = x.numel() / std::max<std::int64_t>(1, x.dim(0) * x.dim(1));
  return {x.dim(0), x.dim(1), inner};
}

Shape single_channel_shape(const Shape& s) {
  Shape out = s;
  out[1] = 1;
  return out;
}

}  // namespace

Tensor channel_l2_norm(const Tensor& x) {
  const auto L = channel_layout(x, "channel_l2_norm");
  if (L.channels == 0) throw std::invalid_argument("channel_l2_norm: empty channel axis");
  const auto& v = x.node()->data;
  std::vector<double> y(static_cast<std::size_t>(L.batch * L.inner), 0.0);
  for (std::int64_t b = 0; b < L.batch; ++b) {
    for (std::int64_t c = 0; c < L.channels; ++c) {
      const double* src = v.data() + (b * L.channels + c) * L.inner;
      double* dst = y.data() + b * L.inner;
      for (std::int64_t i = 0; i < L.inner; ++i) dst[i] += src[i] * src[i];
    }
  }
  for (auto& e : y) e = std::sqrt(e);
  NodePtr xn = x.node();
  return make_result(single_channel_shape(x.shape()), std::move(y), {&x}, [xn, L](Node& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::int64_t b = 0; b < L.batch; ++b) {
      const double* norm = self.data.data() + b * L.inner;
      const double* go = self.grad.data() + b * L.inner;
      for (std::int64_t c = 0; c < L.channels; ++c) {
        const std::int64_t off = (b * L.channels + c) * L.inner;
        for (std::int64_t i = 0; i < L.inner; ++i) {
          // Zero subgradient at the origin.
          if (norm[i] > 0.0) g[off + i] += go[i] * xn->data[off + i] / norm[i];
        }
      }
    }
  });
}

Tensor channel_mean(const Tensor& x) {
  const auto L = channel_layout(x, "channel_mean");
  if (L.channels == 0) throw std::invalid_argument("channel_mean: empty channel axis");
  const auto& v = x.node()->data;
  std::vector<double> y(static_cast<std::size_t>(L.batch * L.inner), 0.0);
  for (std::int64_t b = 0; b < L.batch; ++b) {
    double* dst = y.data() + b * L.inner;
    for (std::int64_t c = 0; c < L.channels; ++c) {
      const double* src = v.data() + (b * L.channels + c) * L.inner;
      for (std::int64_t i = 0; i < L.inner; ++i) dst[i] += src[i];
    }
    for (std::int64_t i = 0; i < L.inner; ++i) dst[i] /= static_cast<double>(L.channels);
  }
  NodePtr xn = x.node();
  return make_result(single_channel_shape(x.shape()), std::move(y), {&x}, [xn, L](Node& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    const double inv = 1.0 / static_cast<double>(L.channels);
    for (std::int64_t b = 0; b < L.batch; ++b) {
      const double* go = self.grad.data() + b * L.inner;
      for (std::int64_t c = 0; c < L.channels; ++c) {
        double* dst = g.data() + (b * L.channels + c) * L.inner;
        for (std::int64_t i = 0; i < L.inner; ++i) dst[i] += go[i] * inv;
      }
    }
  });
}

Tensor channel_softmax(const Tensor& x) {
  const auto L = channel_layout(x, "channel_softmax");
  if (L.channels == 0) throw std::invalid_argument("channel_softmax: empty channel axis");
  const auto& v = x.node()->data;
  std::vector<double> y(v.size());
  for (std::int64_t b = 0; b < L.batch; ++b) {
    for (std::int64_t i = 0; i < L.inner; ++i) {
      const std::int64_t base = b * L.channels * L.inner + i;
      double mx = v[base];
      for (std::int64_t c = 1; c < L.channels; ++c) mx = std::max(mx, v[base + c * L.inner]);
      double z = 0.0;
      for (std::int64_t c = 0; c < L.channels; ++c) {
        const double e = std::exp(v[base + c * L.inner] - mx);
        y[base + c * L.inner] = e;
        z += e;
      }
      for (std::int64_t c = 0; c < L.channels; ++c) y[base + c * L.inner] /= z;
    }
  }
  NodePtr xn = x.node();
  return make_result(x.shape(), std::move(y), {&x}, [xn, L](Node& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::int64_t b = 0; b < L.batch; ++b) {
      for (std::int64_t i = 0; i < L.inner; ++i) {
        const std::int64_t base = b * L.channels * L.inner + i;
        double dot = 0.0;
        for (std::int64_t c = 0; c < L.channels; ++c) {
          dot += self.grad[base + c * L.inner] * self.data[base + c * L.inner];
        }
        for (std::int64_t c = 0; c < L.channels; ++c) {
          const auto k = base + c * L.inner;
          g[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

Tensor minmax_normalize(const Tensor& x, double eps) {
  const auto L = channel_layout(x, "minmax_normalize");
  if (L.inner == 0) throw std::invalid_argument("minmax_normalize: empty spatial extent");
  const auto& v = x.node()->data;
  const auto slabs = static_cast<std::size_t>(L.batch * L.channels);
  auto argmin = std::make_shared<std::vector<std::int64_t>>(slabs);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(slabs);
  std::vector<double> y(v.size());
  for (std::size_t s = 0; s < slabs; ++s) {
    const double* src = v.data() + static_cast<std::int64_t>(s) * L.inner;
    const auto [lo, hi] = std::minmax_element(src, src + L.inner);
    (*argmin)[s] = lo - src;
    (*argmax)[s] = hi - src;
    const double denom = *hi - *lo + eps;
    double* dst = y.data() + static_cast<std::int64_t>(s) * L.inner;
    for (std::int64_t i = 0; i < L.inner; ++i) dst[i] = (src[i] - *lo) / denom;
  }
  NodePtr xn = x.node();
  return make_result(x.shape(), std::move(y), {&x}, [xn, L, argmin, argmax, eps](Node& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    const auto slabs = static_cast<std::size_t>(L.batch * L.channels);
    for (std::size_t s = 0; s < slabs; ++s) {
      const std::int64_t off = static_cast<std::int64_t>(s) * L.inner;
      const double lo = xn->data[off + (*argmin)[s]];
      const double hi = xn->data[off + (*argmax)[s]];
      const double denom = hi - lo + eps;
      // y_i = (x_i - lo) / denom
      double sum_gy = 0.0, sum_g = 0.0;
      for (std::int64_t i = 0; i < L.inner; ++i) {
        const double go = self.grad[off + i];
        g[off + i] += go / denom;
        sum_g += go;
        sum_gy += go * self.data[off + i];
      }
      // d/d lo: -1/denom + y/denom ; d/d hi: -y/denom
      g[off + (*argmin)[s]] += (-sum_g + sum_gy) / denom;
      g[off + (*argmax)[s]] += -sum_gy / denom;
    }
  });
}

// --- shape ops ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  NodePtr an = a.node();
  std::vector<double> y = an->data;
  return make_result(std::move(shape), std::move(y), {&a}, [an](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor cat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("cat: no inputs");
  for (const auto& p : parts) require_defined(p, "cat");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("cat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = (d == axis) || s[d] == ref[d];
    if (!ok) {
      throw DimensionError("cat: shape " + shape_str(s) + " incompatible with " +
                           shape_str(ref) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  std::vector<double> y(static_cast<std::size_t>(numel_of(out_shape)));
  const std::int64_t out_row = out_shape[axis] * inner;
  std::int64_t offset = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::int64_t row = p.dim(axis) * inner;
    const double* src = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * row, src + (o + 1) * row, y.data() + o * out_row + offset);
    }
    offset += row;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result(out_shape, std::move(y), parts,
                     [nodes, offsets, outer, inner, out_row, axis](Node& self) {
                       for (std::size_t k = 0; k < nodes.size(); ++k) {
                         auto& n = nodes[k];
                         if (!n->requires_grad) continue;
                         auto& g = n->grad_buffer();
                         const std::int64_t row = n->shape[axis] * inner;
                         for (std::int64_t o = 0; o < outer; ++o) {
                           const double* src = self.grad.data() + o * out_row + offsets[k];
                           double* dst = g.data() + o * row;
                           for (std::int64_t i = 0; i < row; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor slice_batch(const Tensor& a, std::int64_t begin, std::int64_t end) {
  require_defined(a, "slice_batch");
  if (a.ndim() == 0 || begin < 0 || end > a.dim(0) || begin >= end) {
    throw DimensionError("slice_batch: invalid range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") for " + shape_str(a.shape()));
  }
  const std::int64_t row = a.numel() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape[0] = end - begin;
  std::vector<double> y(a.data().begin() + begin * row, a.data().begin() + end * row);
  NodePtr an = a.node();
  return make_result(out_shape, std::move(y), {&a}, [an, begin, row](Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * row + i] += self.grad[i];
  });
}

// --- convolution ----------------------------------------------------------

namespace {

// Output rows per im2col slab; bounds the column buffer to a few tens of MB.
std::int64_t slab_rows(const kernels::ConvGeometry& g) {
  constexpr std::int64_t kBudget = 1 << 22;  // doubles
  const std::int64_t per_row = g.rows() * g.out_plane();
  return std::clamp<std::int64_t>(kBudget / std::max<std::int64_t>(per_row, 1), 1, g.out[0]);
}

bool is_pointwise(const kernels::ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.padding == 0;
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  require_rank5(input, "conv3d input");
  require_rank5(weight, "conv3d weight");
  const auto& is = input.shape();
  const auto& ws = weight.shape();
  const int k = static_cast<int>(ws[2]);
  if (ws[3] != k || ws[4] != k) {
    throw DimensionError("conv3d: kernel must be cubic, weight " + shape_str(ws));
  }
  if (k % 2 == 0) throw DimensionError("conv3d: kernel size must be odd, got " + std::to_string(k));
  if (stride < 1 || padding < 0) throw DimensionError("conv3d: invalid stride/padding");
  if (ws[1] != is[1]) {
    throw DimensionError("conv3d: input channel axis (axis 1) has " + std::to_string(is[1]) +
                         " but weight expects " + std::to_string(ws[1]) + " (weight axis 1)");
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != ws[0])) {
    throw DimensionError("conv3d: bias shape " + shape_str(bias.shape()) +
                         " does not match output channels " + std::to_string(ws[0]));
  }
  kernels::ConvGeometry g{is[1], {is[2], is[3], is[4]}, {0, 0, 0}, k, stride, padding};
  static const char* kAxisName[3] = {"H (axis 2)", "W (axis 3)", "D (axis 4)"};
  for (int d = 0; d < 3; ++d) {
    if (g.in[d] + 2 * padding < k) {
      throw DimensionError(std::string("conv3d: spatial axis ") + kAxisName[d] + " of size " +
                           std::to_string(g.in[d]) + " is smaller than the kernel");
    }
    g.out[d] = kernels::conv_out_size(g.in[d], k, stride, padding);
  }
  const std::int64_t B = is[0], Co = ws[0];
  const std::int64_t K = g.rows();
  const std::int64_t n_out = g.out[0] * g.out_plane();
  Shape out_shape{B, Co, g.out[0], g.out[1], g.out[2]};
  std::vector<double> y(static_cast<std::size_t>(numel_of(out_shape)));

  using kernels::ConstRowMap;
  using kernels::RowMap;
  const ConstRowMap<double> W(weight.data().data(), Co, K);
  const std::int64_t rows_per_slab = slab_rows(g);
  std::vector<double> col;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* x = input.data().data() + b * g.channels * g.in_voxels();
    double* yb = y.data() + b * Co * n_out;
    RowMap<double> Y(yb, Co, n_out);
    if (is_pointwise(g)) {
      Y.noalias() = W * ConstRowMap<double>(x, K, n_out);
    } else {
      for (std::int64_t oh = 0; oh < g.out[0]; oh += rows_per_slab) {
        const std::int64_t oe = std::min(g.out[0], oh + rows_per_slab);
        const std::int64_t cols = (oe - oh) * g.out_plane();
        col.resize(static_cast<std::size_t>(K * cols));
        kernels::im2col(x, g, oh, oe, col.data());
        Y.middleCols(oh * g.out_plane(), cols).noalias() = W * ConstRowMap<double>(col.data(), K, cols);
      }
    }
    if (bias.defined()) {
      for (std::int64_t c = 0; c < Co; ++c) Y.row(c).array() += bias.data()[c];
    }
  }

  NodePtr xn = input.node(), wn = weight.node();
  NodePtr bn = bias.defined() ? bias.node() : nullptr;
  return make_result(
      out_shape, std::move(y), {&input, &weight, &bias},
      [xn, wn, bn, g, B, Co, K, n_out, rows_per_slab](Node& self) {
        const ConstRowMap<double> W(wn->data.data(), Co, K);
        std::vector<double> col;
        for (std::int64_t b = 0; b < B; ++b) {
          const double* x = xn->data.data() + b * g.channels * g.in_voxels();
          const ConstRowMap<double> dY(self.grad.data() + b * Co * n_out, Co, n_out);
          if (bn && bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::int64_t c = 0; c < Co; ++c) gb[c] += dY.row(c).sum();
          }
          if (is_pointwise(g)) {
            const ConstRowMap<double> X(x, K, n_out);
            if (wn->requires_grad) {
              RowMap<double>(wn->grad_buffer().data(), Co, K).noalias() += dY * X.transpose();
            }
            if (xn->requires_grad) {
              RowMap<double>(xn->grad_buffer().data() + b * K * n_out, K, n_out).noalias() +=
                  W.transpose() * dY;
            }
            continue;
          }
          for (std::int64_t oh = 0; oh < g.out[0]; oh += rows_per_slab) {
            const std::int64_t oe = std::min(g.out[0], oh + rows_per_slab);
            const std::int64_t cols = (oe - oh) * g.out_plane();
            const auto dYs = dY.middleCols(oh * g.out_plane(), cols);
            col.resize(static_cast<std::size_t>(K * cols));
            if (wn->requires_grad) {
              kernels::im2col(x, g, oh, oe, col.data());
              RowMap<double>(wn->grad_buffer().data(), Co, K).noalias() +=
                  dYs * ConstRowMap<double>(col.data(), K, cols).transpose();
            }
            if (xn->requires_grad) {
              RowMap<double>(col.data(), K, cols).noalias() = W.transpose() * dYs;
              kernels::col2im(col.data(), g, oh, oe,
                              xn->grad_buffer().data() + b * g.channels * g.in_voxels());
            }
          }
        }
      });
}

// --- interpolation --------------------------------------------------------

Tensor interp3d(const Tensor& input, const std::array<std::int64_t, 3>& target,
                InterpMode mode) {
  require_rank5(input, "interp3d");
  for (auto t : target) {
    if (t < 1) throw DimensionError("interp3d: target dimensions must be >= 1");
  }
  const auto& s = input.shape();
  const std::int64_t slabs = s[0] * s[1];
  const std::array<std::int64_t, 3> in{s[2], s[3], s[4]};
  for (auto n : in) {
    if (n < 1) throw DimensionError("interp3d: empty input spatial axis");
  }
  const std::int64_t in_vox = in[0] * in[1] * in[2];
  const std::int64_t out_vox = target[0] * target[1] * target[2];
  Shape out_shape{s[0], s[1], target[0], target[1], target[2]};
  std::vector<double> y(static_cast<std::size_t>(slabs * out_vox));

  if (mode == InterpMode::nearest) {
    auto index = std::make_shared<std::vector<std::int64_t>>(out_vox);
    std::int64_t o = 0;
    for (std::int64_t i = 0; i < target[0]; ++i) {
      const auto si = kernels::nearest_tap(i, in[0], target[0]);
      for (std::int64_t j = 0; j < target[1]; ++j) {
        const auto sj = kernels::nearest_tap(j, in[1], target[1]);
        for (std::int64_t l = 0; l < target[2]; ++l) {
          (*index)[o++] = (si * in[1] + sj) * in[2] + kernels::nearest_tap(l, in[2], target[2]);
        }
      }
    }
    const auto& x = input.node()->data;
    for (std::int64_t sl = 0; sl < slabs; ++sl) {
      for (std::int64_t v = 0; v < out_vox; ++v) y[sl * out_vox + v] = x[sl * in_vox + (*index)[v]];
    }
    NodePtr xn = input.node();
    return make_result(out_shape, std::move(y), {&input},
                       [xn, index, slabs, in_vox, out_vox](Node& self) {
                         if (!xn->requires_grad) return;
                         auto& g = xn->grad_buffer();
                         for (std::int64_t sl = 0; sl < slabs; ++sl) {
                           for (std::int64_t v = 0; v < out_vox; ++v) {
                             g[sl * in_vox + (*index)[v]] += self.grad[sl * out_vox + v];
                           }
                         }
                       });
  }

  using Tap = kernels::LinearTap<double>;
  auto taps = std::make_shared<std::array<std::vector<Tap>, 3>>();
  for (int d = 0; d < 3; ++d) {
    for (std::int64_t i = 0; i < target[d]; ++i) {
      (*taps)[d].push_back(kernels::linear_tap<double>(i, in[d], target[d]));
    }
  }
  // Visits the 8 corner contributions of every output voxel.
  auto for_each_corner = [taps, in, target](auto&& fn) {
    std::int64_t o = 0;
    for (std::int64_t i = 0; i < target[0]; ++i) {
      const Tap& ti = (*taps)[0][i];
      for (std::int64_t j = 0; j < target[1]; ++j) {
        const Tap& tj = (*taps)[1][j];
        for (std::int64_t l = 0; l < target[2]; ++l, ++o) {
          const Tap& tl = (*taps)[2][l];
          for (int c = 0; c < 8; ++c) {
            const std::int64_t ii = (c & 4) ? ti.hi : ti.lo;
            const std::int64_t jj = (c & 2) ? tj.hi : tj.lo;
            const std::int64_t ll = (c & 1) ? tl.hi : tl.lo;
            const double w = ((c & 4) ? ti.w_hi : 1.0 - ti.w_hi) *
                             ((c & 2) ? tj.w_hi : 1.0 - tj.w_hi) *
                             ((c & 1) ? tl.w_hi : 1.0 - tl.w_hi);
            fn(o, (ii * in[1] + jj) * in[2] + ll, w);
          }
        }
      }
    }
  };
  const auto& x = input.node()->data;
  for (std::int64_t sl = 0; sl < slabs; ++sl) {
    const double* src = x.data() + sl * in_vox;
    double* dst = y.data() + sl * out_vox;
    std::fill(dst, dst + out_vox, 0.0);
    for_each_corner([&](std::int64_t o, std::int64_t i, double w) { dst[o] += w * src[i]; });
  }
  NodePtr xn = input.node();
  return make_result(out_shape, std::move(y), {&input},
                     [xn, for_each_corner, slabs, in_vox, out_vox](Node& self) {
                       if (!xn->requires_grad) return;
                       auto& g = xn->grad_buffer();
                       for (std::int64_t sl = 0; sl < slabs; ++sl) {
                         double* dst = g.data() + sl * in_vox;
                         const double* go = self.grad.data() + sl * out_vox;
                         for_each_corner(
                             [&](std::int64_t o, std::int64_t i, double w) { dst[i] += w * go[o]; });
                       }
                     });
}

}  // namespace bmds
