#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmds {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this->grad into the parents. Empty for leaves.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Dense row-major float64 array with an optional reverse-mode graph node.
///
/// Copies are shallow: two Tensor handles can refer to the same storage,
/// the way parameters are shared between a model and its optimizer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t ndim() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// New leaf holding a copy of the values, outside any graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
  void backward() const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

/// Gradient recording is on by default and is thread-local.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise arithmetic. Operands must have identical shapes, or one of
// them must hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scalar_mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scalar_mul(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(neg(a), c); }

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sums over `axes`, removing them from the shape.
Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes);
/// Population variance (divisor = number of reduced elements).
Tensor var(const Tensor& a, const std::vector<std::size_t>& axes);

// Channel-axis (axis 1) operations on [B, C, ...] tensors.
Tensor channel_l2_norm(const Tensor& x);   // -> [B, 1, ...]
Tensor channel_mean(const Tensor& x);      // -> [B, 1, ...]
Tensor channel_softmax(const Tensor& x);   // same shape, sums to 1 over C

/// (v - min) / (max - min + eps) over the spatial axes of each (b, c) slab.
Tensor minmax_normalize(const Tensor& x, double eps);

Tensor reshape(const Tensor& a, Shape shape);
Tensor cat(const std::vector<Tensor>& parts, std::size_t axis);

/// Slab [begin, end) of axis 0.
Tensor slice_batch(const Tensor& a, std::int64_t begin, std::int64_t end);

/// 3D cross-correlation. input [B,Ci,H,W,D], weight [Co,Ci,k,k,k], bias [Co]
/// (bias may be undefined). Output size per axis is
/// floor((n + 2 * padding - k) / stride) + 1.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0);

enum class InterpMode { nearest, trilinear };

/// Resizes the three trailing axes of [B,C,H,W,D]. Trilinear uses the
/// align_corners=false convention.
Tensor interp3d(const Tensor& input, const std::array<std::int64_t, 3>& target,
                InterpMode mode);

}  // namespace bmds
