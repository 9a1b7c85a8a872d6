#pragma once

// Reverse-mode automatic differentiation over small dense tensors.
//
// A Tape records every operation of one forward pass. Node ids are assigned in
// creation order, which is a topological order, so the backward sweep simply
// walks the node list in reverse.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "handkin/errors.hpp"

namespace handkin::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major tensor of doubles. A rank-0 shape holds one value.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  void fill(double v);

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Named learnable tensors. Exclusive writer during optimization, shared readers otherwise.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value);
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t total_size() const noexcept;
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor& at(std::size_t i) { return values_.at(i); }
  const Tensor& at(std::size_t i) const { return values_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const;
  const std::vector<Tensor>& tensors() const noexcept { return values_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  /// Accumulates into the parent gradients. Entries are null for parents that need no gradient.
  using Pullback = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Registers a parameter as a leaf; repeated calls return the same node.
  Var param(const ParamStore& store, std::size_t index);

  /// Adds an operation node. Throws NumericalError naming the op if `value` is not finite.
  Var record(const char* op, Tensor value, std::vector<Var> parents, Pullback pullback);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Accumulated gradient, zeros if the node was never reached.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const char* op(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// Seeds a scalar output with 1.
  void backward(Var output);
  /// Leaf gradients accumulate across calls; interior gradients are reset per call.
  void backward(Var output, const Tensor& seed);
  void zero_grad();

  /// Gradients for every tensor of `store`, zeros for parameters not used on this tape.
  std::vector<Tensor> param_grads(const ParamStore& store) const;

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Pullback pullback;
    bool requires_grad = false;
    bool leaf = false;
  };

  void touch(std::size_t id);

  std::deque<Node> nodes_;
  std::vector<std::size_t> touched_;
  std::unordered_map<const ParamStore*, std::vector<std::size_t>> bound_;
  bool grad_enabled_;
};

// ---- primitives ------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

Var sin(Var a);
Var cos(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var square(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var silu(Var a);
Var tanh(Var a);

/// Numpy-style broadcast: trailing axes aligned, size-1 or missing axes expand.
Var broadcast_to(Var a, const Shape& shape);

Var sum(Var a);
Var mean(Var a);
/// Reduces one axis, removing it from the shape.
Var sum(Var a, std::size_t axis);
Var mean(Var a, std::size_t axis);

/// a[..., k] x b[k, n] -> [..., n]; leading axes of `a` are flattened.
Var matmul(Var a, Var b);
/// Batched a[B, m, k] x b[B, k, n] -> [B, m, n].
Var bmm(Var a, Var b);
/// Swaps the last two axes.
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);

/// Softmax over the last axis.
Var softmax(Var a);
/// Softmax over the last axis of a[B, Lq, Lk] where keys with hidden[b * Lk + k] get exactly zero weight.
Var masked_softmax(Var a, const std::vector<bool>& hidden);
/// Normalizes the last axis to zero mean, unit variance.
Var layer_norm(Var a, double eps = 1e-5);
/// Inverted dropout with a mask drawn from `rng`; identity when p == 0.
Var dropout(Var a, double p, std::mt19937_64& rng);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }

/// x[..., in] W[in, out] + b[out].
Var linear(Var x, Var weight, Var bias);

// ---- gradient checking -----------------------------------------------------

struct GradCheckEntry {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<GradCheckEntry> failures;
};

struct GradCheckOptions {
  double tol = 1e-5;
  double step = 1e-5;
  /// Denominator floor: entries are compared by |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Compares reverse-mode gradients of scalar `f` at `x` against central differences.
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& options = {});

/// Same check over every parameter of `store`; `f` must fetch parameters through Tape::param.
GradCheckReport grad_check_params(const std::function<Var(Tape&)>& f, ParamStore& store,
                                  const GradCheckOptions& options = {});

// ---- checkpoints -----------------------------------------------------------

/// Layout: 8-byte magic "HKCKPT01", u64 LE header length, JSON header
/// {names, shapes, offsets, meta}, then little-endian float64 values.
void save_checkpoint(const std::string& path, const ParamStore& store, const std::string& meta_json = "{}");

struct Checkpoint {
  ParamStore params;
  std::string meta_json;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace handkin::ad
