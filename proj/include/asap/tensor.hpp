#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace asap {

#ifdef ASAP_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

// Error hierarchy shared by every module.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class AxisError : public Error {
 public:
  using Error::Error;
};
class ContractError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};
class StateError : public Error {
 public:
  using Error::Error;
};
class IOError : public Error {
 public:
  using Error::Error;
};
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Ordered list of positive extents. 4-D tensors are laid out N, C, H, W.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::vector<std::size_t> dims);

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t numel() const;
  std::string str() const;

  bool operator==(const Shape& other) const = default;

 private:
  std::vector<std::size_t> dims_;
};

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<real>& ensure_grad();
};

// Records an op result. If no input requires grad (or grad mode is off) the
// result is a detached leaf and `backward` is dropped.
Tensor make_result(Shape shape, std::vector<real> data, std::vector<Tensor> inputs,
                   const char* op, std::function<void(Node&)> backward);

// Accumulate into the grad buffer of input `i` of `self` if it wants one.
inline bool wants_grad(const Node& self, std::size_t i) {
  return self.inputs[i]->requires_grad;
}

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage and graph position.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::span<const real> data() const { return node_->data; }
  // Mutation is reserved for leaves (parameters, optimizer updates, tests).
  std::span<real> mutable_data();

  real item() const;
  real at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const real> grad() const;
  std::span<real> mutable_grad();
  void zero_grad();

  // Reverse-mode sweep from a single-element root. Leaf grads accumulate
  // across calls; intermediate grads are recomputed each call.
  void backward() const;

  // Copy of the values with no graph history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Collects the branch decisions taken by piecewise ops (relu masks, OHEM
/// kept sets) during a forward pass so finite differences can detect when a
/// perturbation crossed a kink.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  std::uint64_t signature() const { return hash_; }
  // Number of piecewise inputs that sat exactly on a breakpoint.
  std::size_t exact_kinks() const { return exact_kinks_; }

  static void record(std::span<const std::uint8_t> pattern);
  static void record_exact_kink(std::size_t count = 1);

 private:
  std::uint64_t hash_ = 1469598103934665603ull;
  std::size_t exact_kinks_ = 0;
  KinkProbe* previous_;
};

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real s);
Tensor add_scalar(const Tensor& a, real s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, real s) { return scale(a, s); }
inline Tensor operator*(real s, const Tensor& a) { return scale(a, s); }

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,m,k] x [B,k,n]
Tensor transpose_last2(const Tensor& a);

// Shape
Tensor reshape(const Tensor& a, Shape shape);

// Reductions
enum class Stat { mean, var };
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Population statistic over `axes`; reduced axes are dropped unless keep_dims.
// A reduction over no axes is the identity for mean and zero for var.
Tensor reduce(Stat stat, const Tensor& a, const std::vector<std::size_t>& axes,
              bool keep_dims = false);

/// Row-major dense GEMM: C (+)= op(A) * op(B). Used by matmul and conv kernels.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const real* a, const real* b, real* c, bool accumulate);

}  // namespace asap
