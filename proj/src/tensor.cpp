#include "memcomputer/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace memcomputer {

namespace {

thread_local Tape* g_active_tape = nullptr;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

using ImplPtr = std::shared_ptr<TensorImpl>;

void record(std::function<void()> rule) { g_active_tape->record(std::move(rule)); }

bool wants_grad(const ImplPtr& p) { return p && p->requires_grad; }

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisView {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

// Maps every output element of a broadcast binary op to its source offsets.
struct BroadcastPlan {
  Shape out;
  bool same = false;  // a and b have the out shape; offsets are identity
  std::vector<std::uint32_t> ia, ib;
};

BroadcastPlan plan_broadcast(const Shape& sa, const Shape& sb) {
  BroadcastPlan plan;
  if (sa == sb) {
    plan.out = sa;
    plan.same = true;
    return plan;
  }
  const std::size_t rank = std::max(sa.size(), sb.size());
  Shape a(rank, 1), b(rank, 1);
  std::copy(sa.begin(), sa.end(), a.begin() + static_cast<std::ptrdiff_t>(rank - sa.size()));
  std::copy(sb.begin(), sb.end(), b.begin() + static_cast<std::ptrdiff_t>(rank - sb.size()));
  plan.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError("cannot broadcast " + shape_str(sa) + " with " + shape_str(sb));
    }
    plan.out[i] = std::max(a[i], b[i]);
  }
  // Strides with zeros on broadcast axes.
  std::vector<std::size_t> stride_a(rank, 0), stride_b(rank, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = rank; i-- > 0;) {
    stride_a[i] = a[i] == 1 ? 0 : acc_a;
    stride_b[i] = b[i] == 1 ? 0 : acc_b;
    acc_a *= a[i];
    acc_b *= b[i];
  }
  const std::size_t n = shape_numel(plan.out);
  plan.ia.resize(n);
  plan.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off_a = 0, off_b = 0;
  for (std::size_t k = 0; k < n; ++k) {
    plan.ia[k] = static_cast<std::uint32_t>(off_a);
    plan.ib[k] = static_cast<std::uint32_t>(off_b);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      off_a += stride_a[d];
      off_b += stride_b[d];
      if (idx[d] < plan.out[d]) break;
      off_a -= stride_a[d] * idx[d];
      off_b -= stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

enum class BinaryKind { add, sub, mul, div };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = shape_numel(plan->out);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(n);
  auto ia = [&](std::size_t k) { return plan->same ? k : plan->ia[k]; };
  auto ib = [&](std::size_t k) { return plan->same ? k : plan->ib[k]; };
  switch (kind) {
    case BinaryKind::add:
      for (std::size_t k = 0; k < n; ++k) out[k] = pa[ia(k)] + pb[ib(k)];
      break;
    case BinaryKind::sub:
      for (std::size_t k = 0; k < n; ++k) out[k] = pa[ia(k)] - pb[ib(k)];
      break;
    case BinaryKind::mul:
      for (std::size_t k = 0; k < n; ++k) out[k] = pa[ia(k)] * pb[ib(k)];
      break;
    case BinaryKind::div:
      for (std::size_t k = 0; k < n; ++k) out[k] = pa[ia(k)] / pb[ib(k)];
      break;
  }
  const bool track = detail::tracking({&a, &b});
  Tensor result = detail::make_output(plan->out, std::move(out), track);
  if (track) {
    record([plan, kind, pa_ = a.impl_ptr(), pb_ = b.impl_ptr(), po = result.impl_ptr()] {
      if (po->grad.empty()) return;
      const std::size_t n = po->data.size();
      const double* g = po->grad.data();
      auto ia = [&](std::size_t k) { return plan->same ? k : plan->ia[k]; };
      auto ib = [&](std::size_t k) { return plan->same ? k : plan->ib[k]; };
      const double* va = pa_->data.data();
      const double* vb = pb_->data.data();
      if (wants_grad(pa_)) {
        double* ga = pa_->grad_buffer();
        switch (kind) {
          case BinaryKind::add:
          case BinaryKind::sub:
            for (std::size_t k = 0; k < n; ++k) ga[ia(k)] += g[k];
            break;
          case BinaryKind::mul:
            for (std::size_t k = 0; k < n; ++k) ga[ia(k)] += g[k] * vb[ib(k)];
            break;
          case BinaryKind::div:
            for (std::size_t k = 0; k < n; ++k) ga[ia(k)] += g[k] / vb[ib(k)];
            break;
        }
      }
      if (wants_grad(pb_)) {
        double* gb = pb_->grad_buffer();
        switch (kind) {
          case BinaryKind::add:
            for (std::size_t k = 0; k < n; ++k) gb[ib(k)] += g[k];
            break;
          case BinaryKind::sub:
            for (std::size_t k = 0; k < n; ++k) gb[ib(k)] -= g[k];
            break;
          case BinaryKind::mul:
            for (std::size_t k = 0; k < n; ++k) gb[ib(k)] += g[k] * va[ia(k)];
            break;
          case BinaryKind::div:
            for (std::size_t k = 0; k < n; ++k) {
              const double bv = vb[ib(k)];
              gb[ib(k)] -= g[k] * va[ia(k)] / (bv * bv);
            }
            break;
        }
      }
    });
  }
  return result;
}

// Elementwise unary op. `deriv(x, y)` returns dy/dx.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const double* px = x.data().data();
  for (std::size_t k = 0; k < n; ++k) out[k] = fwd(px[k]);
  const bool track = detail::tracking({&x});
  Tensor result = detail::make_output(x.shape(), std::move(out), track);
  if (track) {
    record([deriv, px_ = x.impl_ptr(), po = result.impl_ptr()] {
      if (po->grad.empty()) return;
      double* gx = px_->grad_buffer();
      const double* g = po->grad.data();
      const double* vx = px_->data.data();
      const double* vy = po->data.data();
      for (std::size_t k = 0, n = po->data.size(); k < n; ++k) gx[k] += g[k] * deriv(vx[k], vy[k]);
    });
  }
  return result;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

double* TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), 0.0);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

std::size_t Tensor::dim(std::ptrdiff_t axis) const {
  return impl_->shape[detail::normalize_axis(axis, rank())];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data, false);
  return t;
}

// ---------------------------------------------------------------------------

void Tape::record(std::function<void()> backward_rule) { rules_.push_back(std::move(backward_rule)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss");
  }
  if (loss.requires_grad()) loss.impl()->grad_buffer()[0] += 1.0;
  for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  rules_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

void backward(const Tensor& loss) {
  if (!g_active_tape) throw std::logic_error("backward() without an active tape");
  g_active_tape->backward(loss);
}

namespace detail {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, std::vector<double> values, bool track) {
  return Tensor(std::move(shape), std::move(values), track);
}

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const std::ptrdiff_t a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::div); }

Tensor add_scalar(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor one_minus(const Tensor& x) {
  return unary(x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

Tensor neg(const Tensor& x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor oneplus(const Tensor& x) {
  return unary(x, [](double v) { return 1.0 + softplus(v); },
               [](double v, double) { return stable_sigmoid(v); });
}

// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const bool track = detail::tracking({&x});
  Tensor result = detail::make_output(std::move(shape), x.impl()->data, track);
  if (track) {
    record([px = x.impl_ptr(), po = result.impl_ptr()] {
      if (po->grad.empty()) return;
      double* gx = px->grad_buffer();
      for (std::size_t k = 0, n = po->grad.size(); k < n; ++k) gx[k] += po->grad[k];
    });
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  Shape shape = x.shape();
  const std::size_t rows = shape[shape.size() - 2], cols = shape.back();
  const std::size_t batch = x.numel() / (rows * cols);
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = px + b * rows * cols;
    double* dst = out.data() + b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
  const bool track = detail::tracking({&x});
  Tensor result = detail::make_output(std::move(shape), std::move(out), track);
  if (track) {
    record([px_ = x.impl_ptr(), po = result.impl_ptr(), batch, rows, cols] {
      if (po->grad.empty()) return;
      double* gx = px_->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        const double* g = po->grad.data() + b * rows * cols;
        double* dst = gx + b * rows * cols;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) dst[i * cols + j] += g[j * rows + i];
      }
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis_in) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t rank = parts[0].rank();
  const std::size_t axis = detail::normalize_axis(axis_in, rank);
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  bool track = false;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < rank; ++d) {
      if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
        throw ShapeError("concat shape mismatch: " + shape_str(p.shape()) + " vs " +
                         shape_str(parts[0].shape()));
      }
    }
    shape[axis] += p.shape()[axis];
    track = track || detail::tracking({&p});
  }
  const AxisView v = axis_view(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    const std::size_t len = p.shape()[axis];
    offsets.push_back(offset);
    const double* src = p.data().data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(src + o * len * v.inner, len * v.inner,
                  out.data() + (o * v.length + offset) * v.inner);
    }
    offset += len;
  }
  Tensor result = detail::make_output(shape, std::move(out), track);
  if (track) {
    std::vector<ImplPtr> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
    record([impls = std::move(impls), offsets = std::move(offsets), v, axis, po = result.impl_ptr()] {
      if (po->grad.empty()) return;
      for (std::size_t i = 0; i < impls.size(); ++i) {
        if (!wants_grad(impls[i])) continue;
        const std::size_t len = impls[i]->shape[axis];
        double* gp = impls[i]->grad_buffer();
        for (std::size_t o = 0; o < v.outer; ++o) {
          const double* g = po->grad.data() + (o * v.length + offsets[i]) * v.inner;
          double* dst = gp + o * len * v.inner;
          for (std::size_t k = 0; k < len * v.inner; ++k) dst[k] += g[k];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, std::ptrdiff_t axis_in, std::size_t start, std::size_t length) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  if (start + length > x.shape()[axis]) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for " + shape_str(x.shape()));
  }
  const AxisView v = axis_view(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<double> out(shape_numel(shape));
  const double* px = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(px + (o * v.length + start) * v.inner, length * v.inner,
                out.data() + o * length * v.inner);
  }
  const bool track = detail::tracking({&x});
  Tensor result = detail::make_output(std::move(shape), std::move(out), track);
  if (track) {
    record([px_ = x.impl_ptr(), po = result.impl_ptr(), v, start, length] {
      if (po->grad.empty()) return;
      double* gx = px_->grad_buffer();
      for (std::size_t o = 0; o < v.outer; ++o) {
        const double* g = po->grad.data() + o * length * v.inner;
        double* dst = gx + (o * v.length + start) * v.inner;
        for (std::size_t k = 0; k < length * v.inner; ++k) dst[k] += g[k];
      }
    });
  }
  return result;
}

std::vector<Tensor> split(const Tensor& x, const std::vector<std::size_t>& sizes,
                          std::ptrdiff_t axis_in) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != x.shape()[axis]) {
    throw ShapeError("split sizes sum to " + std::to_string(total) + ", axis has " +
                     std::to_string(x.shape()[axis]));
  }
  std::vector<Tensor> parts;
  std::size_t start = 0;
  for (std::size_t s : sizes) {
    parts.push_back(slice(x, static_cast<std::ptrdiff_t>(axis), start, s));
    start += s;
  }
  return parts;
}

Tensor sum(const Tensor& x) {
  const double* px = x.data().data();
  double s = 0.0;
  for (std::size_t k = 0, n = x.numel(); k < n; ++k) s += px[k];
  const bool track = detail::tracking({&x});
  Tensor result = detail::make_output(Shape{}, {s}, track);
  if (track) {
    record([px_ = x.impl_ptr(), po = result.impl_ptr()] {
      if (po->grad.empty()) return;
      double* gx = px_->grad_buffer();
      const double g = po->grad[0];
      for (std::size_t k = 0, n = px_->data.size(); k < n; ++k) gx[k] += g;
    });
  }
  return result;
}

Tensor sum(const Tensor& x, std::ptrdiff_t axis_in, bool keepdim) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const AxisView v = axis_view(x.shape(), axis);
  Shape shape = x.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<double> out(v.outer * v.inner, 0.0);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < v.length; ++l)
      for (std::size_t i = 0; i < v.inner; ++i)
        out[o * v.inner + i] += px[(o * v.length + l) * v.inner + i];
  const bool track = detail::tracking({&x});
  Tensor result = detail::make_output(std::move(shape), std::move(out), track);
  if (track) {
    record([px_ = x.impl_ptr(), po = result.impl_ptr(), v] {
      if (po->grad.empty()) return;
      double* gx = px_->grad_buffer();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t l = 0; l < v.length; ++l)
          for (std::size_t i = 0; i < v.inner; ++i)
            gx[(o * v.length + l) * v.inner + i] += po->grad[o * v.inner + i];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean(const Tensor& x, std::ptrdiff_t axis, bool keepdim) {
  const double n = static_cast<double>(x.dim(axis));
  return mul_scalar(sum(x, axis, keepdim), 1.0 / n);
}

Tensor softmax(const Tensor& x, std::ptrdiff_t axis_in) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const AxisView v = axis_view(x.shape(), axis);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.length * v.inner + i;
      double mx = -INFINITY;
      for (std::size_t l = 0; l < v.length; ++l) mx = std::max(mx, px[base + l * v.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < v.length; ++l) {
        const double e = std::exp(px[base + l * v.inner] - mx);
        out[base + l * v.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < v.length; ++l) out[base + l * v.inner] /= z;
    }
  }
  const bool track = detail::tracking({&x});
  Tensor result = detail::make_output(x.shape(), std::move(out), track);
  if (track) {
    record([px_ = x.impl_ptr(), po = result.impl_ptr(), v] {
      if (po->grad.empty()) return;
      double* gx = px_->grad_buffer();
      const double* s = po->data.data();
      const double* g = po->grad.data();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.length * v.inner + i;
          double dot = 0.0;
          for (std::size_t l = 0; l < v.length; ++l) dot += g[base + l * v.inner] * s[base + l * v.inner];
          for (std::size_t l = 0; l < v.length; ++l) {
            const std::size_t k = base + l * v.inner;
            gx[k] += s[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis_in) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  const AxisView v = axis_view(x.shape(), axis);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.length * v.inner + i;
      double mx = -INFINITY;
      for (std::size_t l = 0; l < v.length; ++l) mx = std::max(mx, px[base + l * v.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < v.length; ++l) z += std::exp(px[base + l * v.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t l = 0; l < v.length; ++l) out[base + l * v.inner] = px[base + l * v.inner] - lse;
    }
  }
  const bool track = detail::tracking({&x});
  Tensor result = detail::make_output(x.shape(), std::move(out), track);
  if (track) {
    record([px_ = x.impl_ptr(), po = result.impl_ptr(), v] {
      if (po->grad.empty()) return;
      double* gx = px_->grad_buffer();
      const double* y = po->data.data();
      const double* g = po->grad.data();
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.length * v.inner + i;
          double gsum = 0.0;
          for (std::size_t l = 0; l < v.length; ++l) gsum += g[base + l * v.inner];
          for (std::size_t l = 0; l < v.length; ++l) {
            const std::size_t k = base + l * v.inner;
            gx[k] += g[k] - std::exp(y[k]) * gsum;
          }
        }
      }
    });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  const std::size_t k = a.dim(-1);
  if (b.dim(-2) != k) {
    throw ShapeError("matmul inner mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t n = b.dim(-1);
  const bool shared_rhs = b.rank() == 2;
  std::size_t batch = 1, m = a.dim(-2);
  if (shared_rhs) {
    m = a.numel() / k;  // fold every leading axis into rows
  } else {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw ShapeError("batched matmul needs matching leading axes: " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
    }
    batch = a.numel() / (m * k);
  }
  Shape shape = a.shape();
  shape.back() = n;
  std::vector<double> out(batch * m * n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    ConstMap A(a.data().data() + bi * m * k, m, k);
    ConstMap B(b.data().data() + (shared_rhs ? 0 : bi * k * n), k, n);
    MutMap C(out.data() + bi * m * n, m, n);
    C.noalias() = A * B;
  }
  const bool track = detail::tracking({&a, &b});
  Tensor result = detail::make_output(std::move(shape), std::move(out), track);
  if (track) {
    record([pa = a.impl_ptr(), pb = b.impl_ptr(), po = result.impl_ptr(), batch, m, k, n, shared_rhs] {
      if (po->grad.empty()) return;
      for (std::size_t bi = 0; bi < batch; ++bi) {
        ConstMap G(po->grad.data() + bi * m * n, m, n);
        const std::size_t boff = shared_rhs ? 0 : bi * k * n;
        if (wants_grad(pa)) {
          MutMap GA(pa->grad_buffer() + bi * m * k, m, k);
          ConstMap B(pb->data.data() + boff, k, n);
          GA.noalias() += G * B.transpose();
        }
        if (wants_grad(pb)) {
          MutMap GB(pb->grad_buffer() + boff, k, n);
          ConstMap A(pa->data.data() + bi * m * k, m, k);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return result;
}

Tensor outer(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1) throw ShapeError("outer needs two vectors");
  return mul(reshape(a, {a.numel(), 1}), reshape(b, {1, b.numel()}));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm gain/bias must have length " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  // Normalized values and inverse deviations are kept for the backward rule.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pbias = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * is;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = pg[j] * xh + pbias[j];
    }
  }
  const bool track = detail::tracking({&x, &gain, &bias});
  Tensor result = detail::make_output(x.shape(), std::move(out), track);
  if (track) {
    record([px_ = x.impl_ptr(), pg_ = gain.impl_ptr(), pb_ = bias.impl_ptr(), po = result.impl_ptr(),
            xhat, inv_std, rows, d] {
      if (po->grad.empty()) return;
      const double* g = po->grad.data();
      const double* xh = xhat->data();
      if (wants_grad(pg_)) {
        double* gg = pg_->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xh[r * d + j];
      }
      if (wants_grad(pb_)) {
        double* gb = pb_->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
      if (wants_grad(px_)) {
        double* gx = px_->grad_buffer();
        const double* gain_v = pg_->data.data();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[r * d + j] * gain_v[j];
            m1 += dxh;
            m2 += dxh * xh[r * d + j];
          }
          m1 *= inv_d;
          m2 *= inv_d;
          const double is = (*inv_std)[r];
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[r * d + j] * gain_v[j];
            gx[r * d + j] += is * (dxh - m1 - xh[r * d + j] * m2);
          }
        }
      }
    });
  }
  return result;
}

double cosine_sim(std::span<const double> row, std::span<const double> key, double eps) {
  double dot = 0.0, nr = 0.0, nk = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    dot += row[j] * key[j];
    nr += row[j] * row[j];
    nk += key[j] * key[j];
  }
  return dot / (std::sqrt(nr) * std::sqrt(nk) + eps);
}

Tensor cosine_similarity(const Tensor& memory, const Tensor& keys, double eps) {
  if (memory.rank() < 2 || keys.rank() != memory.rank()) {
    throw ShapeError("cosine_similarity rank mismatch: " + shape_str(memory.shape()) + " vs " +
                     shape_str(keys.shape()));
  }
  const std::size_t n = memory.dim(-2), w = memory.dim(-1), kk = keys.dim(-2);
  if (keys.dim(-1) != w ||
      !std::equal(memory.shape().begin(), memory.shape().end() - 2, keys.shape().begin())) {
    throw ShapeError("cosine_similarity shape mismatch: " + shape_str(memory.shape()) + " vs " +
                     shape_str(keys.shape()));
  }
  const std::size_t batch = memory.numel() / (n * w);
  Shape shape = keys.shape();
  shape.back() = n;
  std::vector<double> out(batch * kk * n);
  auto mem_norm = std::make_shared<std::vector<double>>(batch * n);
  auto key_norm = std::make_shared<std::vector<double>>(batch * kk);
  auto dots = std::make_shared<std::vector<double>>(batch * kk * n);
  const double* pm = memory.data().data();
  const double* pk = keys.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < w; ++c) s += pm[(b * n + j) * w + c] * pm[(b * n + j) * w + c];
      (*mem_norm)[b * n + j] = std::sqrt(s);
    }
    for (std::size_t q = 0; q < kk; ++q) {
      double s = 0.0;
      for (std::size_t c = 0; c < w; ++c) s += pk[(b * kk + q) * w + c] * pk[(b * kk + q) * w + c];
      (*key_norm)[b * kk + q] = std::sqrt(s);
    }
    for (std::size_t q = 0; q < kk; ++q) {
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < w; ++c) dot += pm[(b * n + j) * w + c] * pk[(b * kk + q) * w + c];
        (*dots)[(b * kk + q) * n + j] = dot;
        out[(b * kk + q) * n + j] = dot / ((*mem_norm)[b * n + j] * (*key_norm)[b * kk + q] + eps);
      }
    }
  }
  const bool track = detail::tracking({&memory, &keys});
  Tensor result = detail::make_output(std::move(shape), std::move(out), track);
  if (track) {
    record([pm_ = memory.impl_ptr(), pk_ = keys.impl_ptr(), po = result.impl_ptr(), mem_norm, key_norm,
            dots, batch, n, w, kk, eps] {
      if (po->grad.empty()) return;
      const double* g = po->grad.data();
      const double* vm = pm_->data.data();
      const double* vk = pk_->data.data();
      double* gm = wants_grad(pm_) ? pm_->grad_buffer() : nullptr;
      double* gk = wants_grad(pk_) ? pk_->grad_buffer() : nullptr;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t q = 0; q < kk; ++q) {
          const double kn = (*key_norm)[b * kk + q];
          const double* key = vk + (b * kk + q) * w;
          for (std::size_t j = 0; j < n; ++j) {
            const double gq = g[(b * kk + q) * n + j];
            if (gq == 0.0) continue;
            const double mn = (*mem_norm)[b * n + j];
            const double dot = (*dots)[(b * kk + q) * n + j];
            const double den = mn * kn + eps;
            const double* row = vm + (b * n + j) * w;
            // s = dot / den; ds/drow = key/den - dot * kn * (row/mn) / den^2.
            // At a zero norm dot vanishes too, so the second term is taken as 0.
            const double row_coef = mn > 0.0 ? dot * kn / (mn * den * den) : 0.0;
            const double key_coef = kn > 0.0 ? dot * mn / (kn * den * den) : 0.0;
            for (std::size_t c = 0; c < w; ++c) {
              if (gm) gm[(b * n + j) * w + c] += gq * (key[c] / den - row_coef * row[c]);
              if (gk) gk[(b * kk + q) * w + c] += gq * (row[c] / den - key_coef * key[c]);
            }
          }
        }
      }
    });
  }
  return result;
}

std::vector<double> dropout_mask(std::size_t length, double keep_prob, Rng& rng) {
  if (!(keep_prob > 0.0) || keep_prob > 1.0) {
    throw std::invalid_argument("dropout keep_prob must lie in (0, 1]");
  }
  std::vector<double> mask(length, 1.0);
  if (keep_prob == 1.0) return mask;
  const double scale = 1.0 / keep_prob;
  for (double& m : mask) m = rng.uniform() < keep_prob ? scale : 0.0;
  return mask;
}

// ---------------------------------------------------------------------------

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Tensor>& params, double h, double floor) {
  for (Tensor p : params) p.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckResult result;
  for (Tensor p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    double worst = 0.0;
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double fp = loss_fn().item();
      values[i] = saved - h;
      const double fm = loss_fn().item();
      values[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    result.per_param.push_back(worst);
    result.max_rel_error = std::max(result.max_rel_error, worst);
  }
  return result;
}

}  // namespace memcomputer
