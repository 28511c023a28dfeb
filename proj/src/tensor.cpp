#include "avdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

namespace avd {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_seq = 0;

// c[M x N] += a[M x D] * b[D x N]
void mm_nn(const double* a, const double* b, double* c, int m, int d, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * d;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int k = 0; k < d; ++k) {
      const double aik = arow[k];
      const double* brow = b + static_cast<std::size_t>(k) * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c[M x N] += a[M x D] * b[N x D]^T (row-by-row dot products)
void mm_nt(const double* a, const double* b, double* c, int m, int d, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * d;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * d;
      double acc = 0.0;
      for (int k = 0; k < d; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

// c[M x N] += a[D x M]^T * b[D x N]
void mm_tn(const double* a, const double* b, double* c, int m, int d, int n) {
  for (int k = 0; k < d; ++k) {
    const double* arow = a + static_cast<std::size_t>(k) * m;
    const double* brow = b + static_cast<std::size_t>(k) * n;
    for (int i = 0; i < m; ++i) {
      const double aki = arow[i];
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
}

std::vector<double>& ensure_grad(detail::TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expects a rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace

namespace detail {
bool grad_enabled() { return g_grad_enabled; }
}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

Tensor wrap_impl(detail::ImplPtr impl) { return Tensor(std::move(impl)); }

namespace {

detail::ImplPtr make_impl(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor: empty shape");
  for (int e : shape)
    if (e <= 0) throw DimensionError("tensor: non-positive extent in " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                         std::to_string(data.size()) + " values");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  impl->seq = ++g_seq;
  return impl;
}

using BackFn = std::function<void(detail::TensorImpl&)>;

Tensor make_op(Shape shape, std::vector<double> data, const char* op,
               std::vector<detail::ImplPtr> parents, BackFn back) {
  bool rg = false;
  if (g_grad_enabled)
    for (const auto& p : parents)
      if (p->requires_grad) { rg = true; break; }
  auto impl = make_impl(std::move(shape), std::move(data), rg);
  if (rg) {
    auto node = std::make_shared<detail::Node>();
    node->op = op;
    node->parents = std::move(parents);
    node->backward = std::move(back);
    impl->node = std::move(node);
  }
  return wrap_impl(std::move(impl));
}

}  // namespace

// ---- Tensor basics -------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), 0.0);
  return wrap_impl(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return wrap_impl(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return wrap_impl(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = stddev * rng.normal();
  return wrap_impl(make_impl(std::move(shape), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::extent(int axis) const { return impl_->shape.at(static_cast<std::size_t>(axis)); }

int Tensor::rows() const {
  check_rank2(*this, "rows");
  return impl_->shape[0];
}

int Tensor::cols() const {
  check_rank2(*this, "cols");
  return impl_->shape[1];
}

std::size_t Tensor::size() const { return impl_->data.size(); }

double Tensor::value() const {
  if (size() != 1) throw UsageError("value: tensor " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

double Tensor::at(int i, int j) const {
  check_rank2(*this, "at");
  return impl_->data[static_cast<std::size_t>(i) * impl_->shape[1] + j];
}

std::vector<double>& Tensor::data() { return impl_->data; }
const std::vector<double>& Tensor::data() const { return impl_->data; }
bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double>& Tensor::grad() {
  if (!has_grad()) throw UsageError("grad: no gradient accumulated");
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw UsageError("grad: no gradient accumulated");
  return impl_->grad;
}

void Tensor::clear_grad() { impl_->grad.clear(); }

void Tensor::backward() {
  if (!defined()) throw UsageError("backward: undefined tensor");
  if (size() != 1)
    throw UsageError("backward: loss must be scalar, got " + shape_str(shape()));
  if (!impl_->requires_grad)
    throw UsageError("backward: loss does not require gradients (no live graph)");

  // Collect the reachable graph.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{impl_.get()};
  while (!stack.empty()) {
    detail::TensorImpl* t = stack.back();
    stack.pop_back();
    if (!seen.insert(t).second) continue;
    if (t->node) {
      if (t->node->consumed)
        throw UsageError("backward: graph already consumed; re-run the forward pass");
      order.push_back(t);
      for (const auto& p : t->node->parents) stack.push_back(p.get());
    }
  }

  // Creation order is a topological order for a dynamically built graph.
  std::sort(order.begin(), order.end(),
            [](const detail::TensorImpl* a, const detail::TensorImpl* b) { return a->seq > b->seq; });

  ensure_grad(*impl_)[0] = 1.0;
  for (detail::TensorImpl* t : order) {
    t->node->backward(*t);
    t->node->consumed = true;
    t->node->backward = nullptr;  // release saved closures
  }
}

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), "matmul", {a.impl(), b.impl()},
                 [m, k, n](detail::TensorImpl& o) {
                   auto& pa = *o.node->parents[0];
                   auto& pb = *o.node->parents[1];
                   if (pa.requires_grad)
                     mm_nt(o.grad.data(), pb.data.data(), ensure_grad(pa).data(), m, n, k);
                   if (pb.requires_grad)
                     mm_tn(pa.data.data(), o.grad.data(), ensure_grad(pb).data(), k, m, n);
                 });
}

Tensor transpose(const Tensor& x) {
  check_rank2(x, "transpose");
  const int m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  const auto& v = x.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] = v[static_cast<std::size_t>(i) * n + j];
  return make_op({n, m}, std::move(out), "transpose", {x.impl()},
                 [m, n](detail::TensorImpl& o) {
                   auto& p = *o.node->parents[0];
                   if (!p.requires_grad) return;
                   auto& g = ensure_grad(p);
                   for (int j = 0; j < n; ++j)
                     for (int i = 0; i < m; ++i)
                       g[static_cast<std::size_t>(i) * n + j] +=
                           o.grad[static_cast<std::size_t>(j) * m + i];
                 });
}

Tensor softmax_rows(const Tensor& x) {
  check_rank2(x, "softmax_rows");
  const int m = x.rows(), n = x.cols();
  const auto& v = x.data();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw NumericError("softmax_rows: non-finite input at flat index " + std::to_string(i));
  std::vector<double> out(v.size());
  for (int i = 0; i < m; ++i) {
    const double* row = v.data() + static_cast<std::size_t>(i) * n;
    double* orow = out.data() + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= s;
  }
  return make_op({m, n}, std::move(out), "softmax_rows", {x.impl()},
                 [m, n](detail::TensorImpl& o) {
                   auto& p = *o.node->parents[0];
                   if (!p.requires_grad) return;
                   auto& g = ensure_grad(p);
                   for (int i = 0; i < m; ++i) {
                     const double* y = o.data.data() + static_cast<std::size_t>(i) * n;
                     const double* go = o.grad.data() + static_cast<std::size_t>(i) * n;
                     double* gx = g.data() + static_cast<std::size_t>(i) * n;
                     double dot = 0.0;
                     for (int j = 0; j < n; ++j) dot += go[j] * y[j];
                     for (int j = 0; j < n; ++j) gx[j] += y[j] * (go[j] - dot);
                   }
                 });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& v = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  return make_op(x.shape(), std::move(out), "relu", {x.impl()},
                 [](detail::TensorImpl& o) {
                   auto& p = *o.node->parents[0];
                   if (!p.requires_grad) return;
                   auto& g = ensure_grad(p);
                   for (std::size_t i = 0; i < o.data.size(); ++i)
                     if (p.data[i] > 0.0) g[i] += o.grad[i];
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto& va = a.data();
  const auto& vb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return make_op(a.shape(), std::move(out), "add", {a.impl(), b.impl()},
                 [](detail::TensorImpl& o) {
                   for (int pi = 0; pi < 2; ++pi) {
                     auto& p = *o.node->parents[pi];
                     if (!p.requires_grad) continue;
                     auto& g = ensure_grad(p);
                     for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i];
                   }
                 });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  check_rank2(x, "add_bias");
  if (b.rank() != 1 || b.extent(0) != x.cols())
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  const int m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  const auto& vx = x.data();
  const auto& vb = b.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * n + j;
      out[idx] = vx[idx] + vb[j];
    }
  return make_op({m, n}, std::move(out), "add_bias", {x.impl(), b.impl()},
                 [m, n](detail::TensorImpl& o) {
                   auto& px = *o.node->parents[0];
                   auto& pb = *o.node->parents[1];
                   if (px.requires_grad) {
                     auto& g = ensure_grad(px);
                     for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i];
                   }
                   if (pb.requires_grad) {
                     auto& g = ensure_grad(pb);
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j)
                         g[j] += o.grad[static_cast<std::size_t>(i) * n + j];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto& va = a.data();
  const auto& vb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return make_op(a.shape(), std::move(out), "mul", {a.impl(), b.impl()},
                 [](detail::TensorImpl& o) {
                   auto& pa = *o.node->parents[0];
                   auto& pb = *o.node->parents[1];
                   if (pa.requires_grad) {
                     auto& g = ensure_grad(pa);
                     for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i] * pb.data[i];
                   }
                   if (pb.requires_grad) {
                     auto& g = ensure_grad(pb);
                     for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i] * pa.data[i];
                   }
                 });
}

Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  const auto& v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * v[i];
  return make_op(x.shape(), std::move(out), "mul_scalar", {x.impl()},
                 [c](detail::TensorImpl& o) {
                   auto& p = *o.node->parents[0];
                   if (!p.requires_grad) return;
                   auto& g = ensure_grad(p);
                   for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += c * o.grad[i];
                 });
}

Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.size() != 1)
    throw DimensionError("scale: scaling factor must hold one value, got " + shape_str(s.shape()));
  const double sv = s.data()[0];
  std::vector<double> out(x.size());
  const auto& v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * v[i];
  return make_op(x.shape(), std::move(out), "scale", {x.impl(), s.impl()},
                 [](detail::TensorImpl& o) {
                   auto& px = *o.node->parents[0];
                   auto& ps = *o.node->parents[1];
                   if (px.requires_grad) {
                     const double sv = ps.data[0];
                     auto& g = ensure_grad(px);
                     for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += sv * o.grad[i];
                   }
                   if (ps.requires_grad) {
                     double acc = 0.0;
                     for (std::size_t i = 0; i < o.data.size(); ++i) acc += o.grad[i] * px.data[i];
                     ensure_grad(ps)[0] += acc;
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_op({1}, {acc}, "sum", {x.impl()},
                 [](detail::TensorImpl& o) {
                   auto& p = *o.node->parents[0];
                   if (!p.requires_grad) return;
                   auto& g = ensure_grad(p);
                   const double go = o.grad[0];
                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  std::vector<double> out = x.data();  // row-major copy; bit-exact
  return make_op(std::move(shape), std::move(out), "reshape", {x.impl()},
                 [](detail::TensorImpl& o) {
                   auto& p = *o.node->parents[0];
                   if (!p.requires_grad) return;
                   auto& g = ensure_grad(p);
                   for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i];
                 });
}

Tensor flatten(const Tensor& x) {
  return reshape(x, {static_cast<int>(x.size())});
}

Tensor concat_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw UsageError("concat_rows: no rows");
  const int c = rows[0].extent(0);
  for (const Tensor& r : rows)
    if (r.rank() != 1 || r.extent(0) != c)
      throw DimensionError("concat_rows: row shape " + shape_str(r.shape()) + " does not match [" +
                           std::to_string(c) + "]");
  const int b = static_cast<int>(rows.size());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(b) * c);
  std::vector<detail::ImplPtr> parents;
  parents.reserve(rows.size());
  for (const Tensor& r : rows) {
    out.insert(out.end(), r.data().begin(), r.data().end());
    parents.push_back(r.impl());
  }
  return make_op({b, c}, std::move(out), "concat_rows", std::move(parents),
                 [c](detail::TensorImpl& o) {
                   for (std::size_t i = 0; i < o.node->parents.size(); ++i) {
                     auto& p = *o.node->parents[i];
                     if (!p.requires_grad) continue;
                     auto& g = ensure_grad(p);
                     const double* go = o.grad.data() + i * static_cast<std::size_t>(c);
                     for (int j = 0; j < c; ++j) g[j] += go[j];
                   }
                 });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_rank2(logits, "cross_entropy");
  const int b = logits.rows(), c = logits.cols();
  if (static_cast<int>(labels.size()) != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(b));
  for (int i = 0; i < b; ++i)
    if (labels[i] < 0 || labels[i] >= c)
      throw LabelError("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," +
                       std::to_string(c) + ") at row " + std::to_string(i));

  const auto& v = logits.data();
  std::vector<double> probs(v.size());
  double loss = 0.0;
  for (int i = 0; i < b; ++i) {
    const double* row = v.data() + static_cast<std::size_t>(i) * c;
    double* prow = probs.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      prow[j] = std::exp(row[j] - mx);
      s += prow[j];
    }
    const double lse = mx + std::log(s);
    for (int j = 0; j < c; ++j) prow[j] /= s;
    loss += lse - row[labels[i]];
  }
  loss /= b;

  return make_op({1}, {loss}, "cross_entropy", {logits.impl()},
                 [b, c, probs = std::move(probs), labels](detail::TensorImpl& o) {
                   auto& p = *o.node->parents[0];
                   if (!p.requires_grad) return;
                   auto& g = ensure_grad(p);
                   const double go = o.grad[0] / b;
                   for (int i = 0; i < b; ++i)
                     for (int j = 0; j < c; ++j) {
                       const std::size_t idx = static_cast<std::size_t>(i) * c + j;
                       g[idx] += go * (probs[idx] - (j == labels[i] ? 1.0 : 0.0));
                     }
                 });
}

std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor& theta, double h) {
  if (h <= 0.0) throw UsageError("finite_diff_grad: step must be positive");
  NoGradGuard guard;
  std::vector<double>& v = theta.data();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    const double fp = f();
    v[i] = saved - h;
    const double fm = f();
    v[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

std::vector<double> softmax_vec(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    s += out[i];
  }
  for (double& x : out) x /= s;
  return out;
}

}  // namespace avd
