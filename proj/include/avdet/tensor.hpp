#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "avdet/error.hpp"
#include "avdet/rng.hpp"

namespace avd {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;   // flat, row-major
  std::vector<double> grad;   // sized lazily on first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;      // creation order; doubles as topological order
  std::shared_ptr<Node> node; // null on leaves
};

using ImplPtr = std::shared_ptr<TensorImpl>;

struct Node {
  const char* op = "";
  std::vector<ImplPtr> parents;
  std::function<void(TensorImpl&)> backward;
  bool consumed = false;
};

bool grad_enabled();

}  // namespace detail

// Suspends graph construction while alive (finite differences, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major tensor of 64-bit floats with reverse-mode autodiff.
/// Value-semantic handle; copies share the underlying buffer. Data is
/// immutable once an op has consumed it (except leaf parameters, which the
/// optimizer updates after the graph is consumed).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int extent(int axis) const;
  int rows() const;  // rank-2 only
  int cols() const;  // rank-2 only
  std::size_t size() const;

  double value() const;  // single-element tensors
  double at(int i, int j) const;

  std::vector<double>& data();
  const std::vector<double>& data() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void clear_grad();

  /// Reverse-mode pass from a scalar loss. Visits every node reachable from
  /// this tensor exactly once, in reverse creation order, accumulating into
  /// the grad buffers of requires_grad tensors. The graph is consumed; a
  /// second call without re-running the forward pass is a UsageError.
  void backward();

  detail::ImplPtr impl() const { return impl_; }

 private:
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}
  detail::ImplPtr impl_;

  friend Tensor wrap_impl(detail::ImplPtr);
};

// ---- operations --------------------------------------------------------
// Each builds the graph when any input requires a gradient (and gradients
// are globally enabled).

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& b);  // broadcast rank-1 b over rows
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, const Tensor& s);     // s: learnable single value
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);
Tensor concat_rows(const std::vector<Tensor>& rows);  // rank-1 rows -> [B x C]
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Central-difference gradient estimate of f with respect to every entry of
/// theta: (f(t+h e_i) - f(t-h e_i)) / 2h. Restores theta exactly. f runs with
/// gradients disabled.
std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& theta,
                                     double h = 1e-5);

/// Numerically stable softmax of a plain vector (no graph).
std::vector<double> softmax_vec(const std::vector<double>& v);

}  // namespace avd
