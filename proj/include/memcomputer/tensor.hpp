#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle onto an immutable buffer plus an optional
// gradient buffer. Operations invoked while a Tape is active (see TapeScope)
// record a backward rule whenever at least one input requires a gradient.
// Tape::backward replays those rules in reverse recording order, which is a
// valid topological order because every input exists before the op using it.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "memcomputer/rng.hpp"

namespace memcomputer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;

  // Returns the gradient buffer, allocating zeros on first use.
  double* grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value);
  static Tensor filled(Shape shape, double value);
  static Tensor vector(std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  // Negative axes count from the back.
  std::size_t dim(std::ptrdiff_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Mutation is reserved for leaf tensors (parameters, optimizer updates).
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t flat_index) const { return impl_->data[flat_index]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  // Zero-length span when no gradient has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();

  // Deep copy without gradient history.
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

class Tape {
 public:
  void record(std::function<void()> backward_rule);
  // Seeds d(loss)/d(loss) = 1 and replays every rule in reverse, then clears
  // the tape. Throws ShapeError on a non-scalar loss.
  void backward(const Tensor& loss);
  std::size_t size() const { return rules_.size(); }
  void clear() { rules_.clear(); }

 private:
  std::vector<std::function<void()>> rules_;
};

// Makes a tape the active one on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording on this thread for the scope's lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

// Runs backward on the active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Elementwise, with numpy-style broadcasting for binary ops.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor one_minus(const Tensor& x);  // 1 - x
Tensor neg(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// 1 + softplus(x), evaluated as 1 + max(x, 0) + log1p(exp(-|x|)).
Tensor oneplus(const Tensor& x);

// ---------------------------------------------------------------------------
// Shape and axis operations.

Tensor reshape(const Tensor& x, Shape shape);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis);
std::vector<Tensor> split(const Tensor& x, const std::vector<std::size_t>& sizes,
                          std::ptrdiff_t axis);
Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t start, std::size_t length);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false);

Tensor softmax(const Tensor& x, std::ptrdiff_t axis = -1);
Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis = -1);

// a: [..., m, k]. b: [k, n] (shared across a's leading axes) or
// [..., k, n] with leading axes identical to a's.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor outer(const Tensor& a, const Tensor& b);

// Normalizes over the last axis; gain and bias have that axis' length.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// memory: [..., N, W], keys: [..., K, W] -> [..., K, N] with
// out[k, j] = <memory_j, key_k> / (|memory_j| |key_k| + eps).
Tensor cosine_similarity(const Tensor& memory, const Tensor& keys, double eps);

double cosine_sim(std::span<const double> row, std::span<const double> key, double eps);

// Inverted-dropout mask: 1/keep_prob with probability keep_prob, else 0.
std::vector<double> dropout_mask(std::size_t length, double keep_prob, Rng& rng);

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_param;  // max relative error per parameter tensor
};

// Compares tape gradients of loss_fn against central differences
// (f(θ+h) − f(θ−h)) / 2h for every entry of every parameter, scoring
// |a − n| / max(|a|, |n|, floor). Central differences carry roundoff of
// roughly ε·|f|/h, so gradients far below that scale cannot be resolved;
// floor keeps them from dominating the score. loss_fn must be deterministic
// and return a scalar.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Tensor>& params, double h = 1e-5, double floor = 1e-8);

namespace detail {

// True when an active tape exists and some input requires a gradient.
bool tracking(std::initializer_list<const Tensor*> inputs);
Tensor make_output(Shape shape, std::vector<double> values, bool track);
std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank);

}  // namespace detail

}  // namespace memcomputer
