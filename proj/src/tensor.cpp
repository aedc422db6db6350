#include "asap/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace asap {

namespace {

thread_local bool g_grad_enabled = true;
thread_local KinkProbe* g_probe = nullptr;

using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

}  // namespace

// ---------------------------------------------------------------- Shape

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("shape extents must be >= 1, got " + str());
  }
}

std::size_t Shape::numel() const {
  return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Node / Tensor

std::vector<real>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), real(0));
  return grad;
}

Tensor detail::make_result(Shape shape, std::vector<real> data, std::vector<Tensor> inputs,
                           const char* op, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool any = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) any = any || t.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), real(0), requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(shape.numel(), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
  if (values.size() != shape.numel()) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values for shape " + shape.str());
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

std::span<real> Tensor::mutable_data() {
  if (!is_leaf()) throw ContractError("mutable_data on a non-leaf tensor");
  return node_->data;
}

real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape().str());
  return node_->data[0];
}

real Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& dims = shape().dims();
  if (index.size() != dims.size()) throw AxisError("at(): rank mismatch");
  std::size_t off = 0, i = 0;
  for (auto v : index) {
    if (v >= dims[i]) throw AxisError("at(): index out of range");
    off = off * dims[i] + v;
    ++i;
  }
  return node_->data[off];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  return *this;
}

std::span<const real> Tensor::grad() const {
  if (node_->grad.empty()) throw StateError("tensor has no gradient");
  return node_->grad;
}

std::span<real> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a single-element root, got " + shape().str());
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), real(0));
  }
  node_->ensure_grad()[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

KinkProbe::KinkProbe() : previous_(g_probe) { g_probe = this; }
KinkProbe::~KinkProbe() { g_probe = previous_; }

void KinkProbe::record(std::span<const std::uint8_t> pattern) {
  if (!g_probe) return;
  auto h = g_probe->hash_;
  for (auto b : pattern) {
    h ^= b;
    h *= 1099511628211ull;
  }
  h ^= pattern.size();
  h *= 1099511628211ull;
  g_probe->hash_ = h;
}

void KinkProbe::record_exact_kink(std::size_t count) {
  if (g_probe) g_probe->exact_kinks_ += count;
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  if (b.numel() == 1 && a.numel() != 1) {
    const real s = b.data()[0];
    std::vector<real> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += s;
    return detail::make_result(a.shape(), std::move(out), {a, b}, "add_scalar_t",
                               [](detail::Node& self) {
                                 if (detail::wants_grad(self, 0)) {
                                   auto& ga = self.inputs[0]->ensure_grad();
                                   for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                 }
                                 if (detail::wants_grad(self, 1)) {
                                   real acc = 0;
                                   for (auto g : self.grad) acc += g;
                                   self.inputs[1]->ensure_grad()[0] += acc;
                                 }
                               });
  }
  require_same_shape(a, b, "add");
  std::vector<real> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& g = self.inputs[k]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<real> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, "sub", [](detail::Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (b.numel() == 1 && a.numel() != 1) {
    const real s = b.data()[0];
    std::vector<real> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= s;
    return detail::make_result(a.shape(), std::move(out), {a, b}, "mul_scalar_t",
                               [](detail::Node& self) {
                                 const real s = self.inputs[1]->data[0];
                                 const auto& x = self.inputs[0]->data;
                                 if (detail::wants_grad(self, 0)) {
                                   auto& ga = self.inputs[0]->ensure_grad();
                                   for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * s;
                                 }
                                 if (detail::wants_grad(self, 1)) {
                                   real acc = 0;
                                   for (std::size_t i = 0; i < x.size(); ++i) acc += self.grad[i] * x[i];
                                   self.inputs[1]->ensure_grad()[0] += acc;
                                 }
                               });
  }
  require_same_shape(a, b, "mul");
  std::vector<real> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, "mul", [](detail::Node& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (detail::wants_grad(self, 0)) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, real s) {
  std::vector<real> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {a}, "scale", [s](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& a, real s) {
  std::vector<real> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  return detail::make_result(a.shape(), std::move(out), {a}, "add_scalar", [](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  const auto x = a.data();
  std::vector<real> out(x.size());
  std::vector<std::uint8_t> mask(x.size());
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = x[i] > 0;
    out[i] = mask[i] ? x[i] : real(0);
    zeros += x[i] == 0;
  }
  KinkProbe::record(mask);
  if (zeros) KinkProbe::record_exact_kink(zeros);
  // Subgradient at exactly 0 is 0.
  return detail::make_result(a.shape(), std::move(out), {a}, "relu",
                             [mask = std::move(mask)](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (mask[i]) g[i] += self.grad[i];
                             });
}

Tensor sigmoid(const Tensor& a) {
  const auto x = a.data();
  std::vector<real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = real(1) / (real(1) + std::exp(-x[i]));
  return detail::make_result(a.shape(), std::move(out), {a}, "sigmoid", [](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const real s = real(1) / (real(1) + std::exp(-x[i]));
      g[i] += self.grad[i] * s * (1 - s);
    }
  });
}

// ---------------------------------------------------------------- linear algebra

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const real* a, const real* b, real* c, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MapRM C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += CMapRM(a, M, K) * CMapRM(b, K, N);
  } else if (trans_a && !trans_b) {
    C.noalias() += CMapRM(a, K, M).transpose() * CMapRM(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += CMapRM(a, M, K) * CMapRM(b, N, K).transpose();
  } else {
    C.noalias() += CMapRM(a, K, M).transpose() * CMapRM(b, N, K).transpose();
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2) {
    throw ShapeError("matmul expects 2-D operands, got " + a.shape().str() + " and " +
                     b.shape().str());
  }
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul inner dimension mismatch " + a.shape().str() + " x " +
                     b.shape().str());
  }
  std::vector<real> out(m * n);
  gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return detail::make_result(Shape{m, n}, std::move(out), {a, b}, "matmul",
                             [m, n, k](detail::Node& self) {
                               const real* A = self.inputs[0]->data.data();
                               const real* B = self.inputs[1]->data.data();
                               if (detail::wants_grad(self, 0))  // dA = dC B^T
                                 gemm(false, true, m, k, n, self.grad.data(), B,
                                      self.inputs[0]->ensure_grad().data(), true);
                               if (detail::wants_grad(self, 1))  // dB = A^T dC
                                 gemm(true, false, k, n, m, A, self.grad.data(),
                                      self.inputs[1]->ensure_grad().data(), true);
                             });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.shape().rank() != 3 || b.shape().rank() != 3 || a.shape()[0] != b.shape()[0]) {
    throw ShapeError("bmm expects [B,m,k] x [B,k,n], got " + a.shape().str() + " and " +
                     b.shape().str());
  }
  const auto batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  if (b.shape()[1] != k) {
    throw ShapeError("bmm inner dimension mismatch " + a.shape().str() + " x " +
                     b.shape().str());
  }
  std::vector<real> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(false, false, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
         out.data() + i * m * n, false);
  }
  return detail::make_result(
      Shape{batch, m, n}, std::move(out), {a, b}, "bmm", [batch, m, n, k](detail::Node& self) {
        const real* A = self.inputs[0]->data.data();
        const real* B = self.inputs[1]->data.data();
        const bool ga = detail::wants_grad(self, 0), gb = detail::wants_grad(self, 1);
        real* dA = ga ? self.inputs[0]->ensure_grad().data() : nullptr;
        real* dB = gb ? self.inputs[1]->ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          const real* dC = self.grad.data() + i * m * n;
          if (ga) gemm(false, true, m, k, n, dC, B + i * k * n, dA + i * m * k, true);
          if (gb) gemm(true, false, k, n, m, A + i * m * k, dC, dB + i * k * n, true);
        }
      });
}

Tensor transpose_last2(const Tensor& a) {
  const auto& d = a.shape().dims();
  if (d.size() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  const std::size_t rows = d[d.size() - 2], cols = d.back();
  const std::size_t batch = a.numel() / (rows * cols);
  std::vector<std::size_t> od = d;
  std::swap(od[od.size() - 2], od.back());
  std::vector<real> out(a.numel());
  const auto x = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out[b * rows * cols + c * rows + r] = x[b * rows * cols + r * cols + c];
  return detail::make_result(Shape(od), std::move(out), {a}, "transpose",
                             [batch, rows, cols](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t b = 0; b < batch; ++b)
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < cols; ++c)
                                     g[b * rows * cols + r * cols + c] +=
                                         self.grad[b * rows * cols + c * rows + r];
                             });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape.numel() != a.numel()) {
    throw ShapeError("reshape " + a.shape().str() + " -> " + shape.str());
  }
  std::vector<real> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a}, "reshape",
                             [](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                             });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  real acc = 0;
  for (auto v : a.data()) acc += v;
  return detail::make_result(Shape{1}, {acc}, {a}, "sum", [](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  real acc = 0;
  for (auto v : a.data()) acc += v;
  const real inv = real(1) / static_cast<real>(a.numel());
  return detail::make_result(Shape{1}, {acc * inv}, {a}, "mean", [inv](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

Tensor reduce(Stat stat, const Tensor& a, const std::vector<std::size_t>& axes, bool keep_dims) {
  const auto& dims = a.shape().dims();
  std::vector<bool> reduced(dims.size(), false);
  for (auto ax : axes) {
    if (ax >= dims.size()) {
      throw AxisError("reduce: axis " + std::to_string(ax) + " invalid for shape " +
                      a.shape().str());
    }
    reduced[ax] = true;
  }

  // Output offset for every input element (reduced axes collapsed).
  std::vector<std::size_t> out_dims_keep(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) out_dims_keep[i] = reduced[i] ? 1 : dims[i];
  std::vector<std::size_t> out_of(a.numel());
  std::size_t count = 1;
  for (std::size_t i = 0; i < dims.size(); ++i)
    if (reduced[i]) count *= dims[i];
  {
    std::vector<std::size_t> idx(dims.size(), 0);
    for (std::size_t e = 0; e < a.numel(); ++e) {
      std::size_t off = 0;
      for (std::size_t i = 0; i < dims.size(); ++i)
        off = off * out_dims_keep[i] + (reduced[i] ? 0 : idx[i]);
      out_of[e] = off;
      for (std::size_t i = dims.size(); i-- > 0;) {
        if (++idx[i] < dims[i]) break;
        idx[i] = 0;
      }
    }
  }
  const std::size_t n_out = a.numel() / count;
  const real inv = real(1) / static_cast<real>(count);
  const auto x = a.data();
  std::vector<real> mu(n_out, real(0));
  for (std::size_t e = 0; e < x.size(); ++e) mu[out_of[e]] += x[e];
  for (auto& v : mu) v *= inv;

  Shape out_shape;
  if (keep_dims) {
    out_shape = Shape(out_dims_keep);
  } else {
    std::vector<std::size_t> od;
    for (std::size_t i = 0; i < dims.size(); ++i)
      if (!reduced[i]) od.push_back(dims[i]);
    if (od.empty()) od.push_back(1);
    out_shape = Shape(od);
  }

  if (stat == Stat::mean) {
    return detail::make_result(out_shape, std::move(mu), {a}, "reduce_mean",
                               [out_of = std::move(out_of), inv](detail::Node& self) {
                                 auto& g = self.inputs[0]->ensure_grad();
                                 for (std::size_t e = 0; e < g.size(); ++e)
                                   g[e] += self.grad[out_of[e]] * inv;
                               });
  }
  std::vector<real> var(n_out, real(0));
  for (std::size_t e = 0; e < x.size(); ++e) {
    const real d = x[e] - mu[out_of[e]];
    var[out_of[e]] += d * d;
  }
  for (auto& v : var) v *= inv;
  return detail::make_result(out_shape, std::move(var), {a}, "reduce_var",
                             [out_of = std::move(out_of), mu = std::move(mu),
                              inv](detail::Node& self) {
                               // d var / d x_e = 2 (x_e - mu) / count
                               auto& g = self.inputs[0]->ensure_grad();
                               const auto& x = self.inputs[0]->data;
                               for (std::size_t e = 0; e < g.size(); ++e)
                                 g[e] += self.grad[out_of[e]] * 2 * (x[e] - mu[out_of[e]]) * inv;
                             });
}

}  // namespace asap
