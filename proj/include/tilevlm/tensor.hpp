#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tilevlm/common.hpp"

namespace tvlm {

// ---------------------------------------------------------------------------
// Instrumentation hooks. The runtime's memory ledger registers itself as the
// active tracker; tensor buffers allocated while a tracker is active report
// their byte counts. FLOPs are counted unconditionally (cheap) so the bench
// harness asserts on counted work, never on wall time.
// ---------------------------------------------------------------------------

class AllocTracker {
 public:
  virtual ~AllocTracker() = default;
  virtual void on_alloc(const char* tag, std::size_t bytes) = 0;
  virtual void on_free(const char* tag, std::size_t bytes) = 0;
};

inline std::shared_ptr<AllocTracker>& active_alloc_tracker() {
  thread_local std::shared_ptr<AllocTracker> tracker;
  return tracker;
}

class TrackerScope {
 public:
  explicit TrackerScope(std::shared_ptr<AllocTracker> t) : prev_(active_alloc_tracker()) {
    active_alloc_tracker() = std::move(t);
  }
  ~TrackerScope() { active_alloc_tracker() = std::move(prev_); }
  TrackerScope(const TrackerScope&) = delete;
  TrackerScope& operator=(const TrackerScope&) = delete;

 private:
  std::shared_ptr<AllocTracker> prev_;
};

inline std::uint64_t& flop_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

inline void flops_add(std::uint64_t n) { flop_counter() += n; }

// ---------------------------------------------------------------------------
// Storage
// ---------------------------------------------------------------------------

struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward touches it

  static constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);
  std::size_t node = kNoNode;  // producing tape node, if recorded

  // Memory accounting: the value buffer of tensors created under an active
  // tracker is reported on construction and again on destruction. Tags must
  // be string literals.
  std::shared_ptr<AllocTracker> tracker;
  const char* tag = "tensor";

  TensorData(std::vector<std::size_t> s, std::vector<double> v, const char* t)
      : shape(std::move(s)), value(std::move(v)), tag(t) {
    tracker = active_alloc_tracker();
    if (tracker) tracker->on_alloc(tag, value.size() * sizeof(double));
  }

  ~TensorData() {
    if (tracker) tracker->on_free(tag, value.size() * sizeof(double));
  }

  TensorData(const TensorData&) = delete;
  TensorData& operator=(const TensorData&) = delete;

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// Handle with shared ownership of the buffer. Copying a Tensor aliases the
// same storage; ops always produce fresh storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, const char* tag = "tensor") {
    std::size_t n = shape_numel(shape);
    return Tensor(std::make_shared<TensorData>(std::move(shape), std::vector<double>(n, 0.0), tag));
  }

  static Tensor full(std::vector<std::size_t> shape, double v, const char* tag = "tensor") {
    std::size_t n = shape_numel(shape);
    return Tensor(std::make_shared<TensorData>(std::move(shape), std::vector<double>(n, v), tag));
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> data, const char* tag = "tensor") {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    return Tensor(std::make_shared<TensorData>(std::move(shape), std::move(data), tag));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return d_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t numel() const { return d_->numel(); }
  std::size_t ndim() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape[i]; }
  std::size_t rows() const { return d_->shape.at(0); }
  std::size_t cols() const { return d_->shape.at(1); }

  const std::vector<double>& value() const { return d_->value; }
  std::vector<double>& mutable_value() { return d_->value; }
  double at(std::size_t i) const { return d_->value[i]; }
  double at(std::size_t i, std::size_t j) const { return d_->value[i * cols() + j]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
    return d_->value[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    d_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (d_->grad.empty()) throw ContractError("grad not populated");
    return d_->grad;
  }
  void zero_grad() {
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  const std::shared_ptr<TensorData>& ptr() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;

  friend Tensor wrap_data(std::shared_ptr<TensorData> d);
};

inline Tensor wrap_data(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }

// ---------------------------------------------------------------------------
// Tape. Nodes are appended in execution order, which is a topological order
// by construction: an op's inputs exist before its output. backward() walks
// the list once in reverse from the loss node, firing only nodes whose output
// contributes to the loss.
// ---------------------------------------------------------------------------

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TapeNode {
  std::function<void()> backward;
  std::shared_ptr<TensorData> output;
  std::vector<std::shared_ptr<TensorData>> inputs;
};

class Tape {
 public:
  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  std::size_t record(TapeNode node) {
    nodes_.push_back(std::move(node));
    std::size_t idx = nodes_.size() - 1;
    nodes_.back().output->node = idx;
    return idx;
  }

  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_string(loss.shape()));
    auto data = loss.ptr();
    if (data->node == TensorData::kNoNode)
      throw ContractError("backward requires a loss recorded on the tape");
    data->ensure_grad();
    data->grad[0] += 1.0;

    std::unordered_set<const TensorData*> needed;
    needed.insert(data.get());
    for (std::size_t i = data->node + 1; i-- > 0;) {
      TapeNode& n = nodes_[i];
      if (!needed.count(n.output.get())) continue;
      n.backward();
      for (const auto& inp : n.inputs) needed.insert(inp.get());
    }
  }

 private:
  std::vector<TapeNode> nodes_;
};

inline Tape& tape() {
  thread_local Tape t;
  return t;
}

inline void backward(const Tensor& loss) { tape().backward(loss); }

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Accumulate into a tensor's grad buffer if it participates in training.
inline void accum_all(TensorData& t, const std::vector<double>& g) {
  if (!t.requires_grad) return;
  t.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
}

inline std::vector<double>* grad_target(TensorData& t) {
  if (!t.requires_grad) return nullptr;
  t.ensure_grad();
  return &t.grad;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  flops_add(ov.size());
  if (detail::should_record({&a, &b})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), bd = b.ptr(), od = out.ptr()]() {
                     if (od->grad.empty()) return;
                     detail::accum_all(*ad, od->grad);
                     detail::accum_all(*bd, od->grad);
                   },
                   out.ptr(),
                   {a.ptr(), b.ptr()}});
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  flops_add(ov.size());
  if (detail::should_record({&a, &b})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), bd = b.ptr(), od = out.ptr()]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*ad))
                       for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += od->grad[i];
                     if (auto* g = detail::grad_target(*bd))
                       for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= od->grad[i];
                   },
                   out.ptr(),
                   {a.ptr(), b.ptr()}});
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  flops_add(ov.size());
  if (detail::should_record({&a, &b})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), bd = b.ptr(), od = out.ptr()]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*ad))
                       for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += od->grad[i] * bd->value[i];
                     if (auto* g = detail::grad_target(*bd))
                       for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += od->grad[i] * ad->value[i];
                   },
                   out.ptr(),
                   {a.ptr(), b.ptr()}});
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  flops_add(ov.size());
  if (detail::should_record({&a})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), od = out.ptr(), c]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*ad))
                       for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += od->grad[i] * c;
                   },
                   out.ptr(),
                   {a.ptr()}});
  }
  return out;
}

// x: [n x d], row: [d], elementwise multiply broadcast over rows.
inline Tensor mul_row(const Tensor& x, const Tensor& row) {
  if (x.ndim() != 2 || row.ndim() != 1 || x.cols() != row.dim(0))
    throw DimensionError("mul_row: " + shape_string(x.shape()) + " vs " + shape_string(row.shape()));
  Tensor out = Tensor::zeros(x.shape());
  std::size_t n = x.rows(), d = x.cols();
  const auto& xv = x.value();
  const auto& rv = row.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) ov[i * d + j] = xv[i * d + j] * rv[j];
  flops_add(n * d);
  if (detail::should_record({&x, &row})) {
    out.set_requires_grad();
    tape().record({[xd = x.ptr(), rd = row.ptr(), od = out.ptr(), n, d]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*xd))
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j)
                           (*g)[i * d + j] += od->grad[i * d + j] * rd->value[j];
                     if (auto* g = detail::grad_target(*rd))
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j)
                           (*g)[j] += od->grad[i * d + j] * xd->value[i * d + j];
                   },
                   out.ptr(),
                   {x.ptr(), row.ptr()}});
  }
  return out;
}

// x: [n x d], bias: [d], broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 2 || bias.ndim() != 1 || x.cols() != bias.dim(0))
    throw DimensionError("add_row_bias: " + shape_string(x.shape()) + " vs " + shape_string(bias.shape()));
  Tensor out = Tensor::zeros(x.shape());
  std::size_t n = x.rows(), d = x.cols();
  const auto& xv = x.value();
  const auto& bv = bias.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) ov[i * d + j] = xv[i * d + j] + bv[j];
  flops_add(n * d);
  if (detail::should_record({&x, &bias})) {
    out.set_requires_grad();
    tape().record({[xd = x.ptr(), bd = bias.ptr(), od = out.ptr(), n, d]() {
                     if (od->grad.empty()) return;
                     detail::accum_all(*xd, od->grad);
                     if (auto* g = detail::grad_target(*bd))
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j) (*g)[j] += od->grad[i * d + j];
                   },
                   out.ptr(),
                   {x.ptr(), bias.ptr()}});
  }
  return out;
}

namespace detail {

// c[m x n] += a[m x k] * b[k x n], fixed i-k-j accumulation order.
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                       std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      double av = arow[t];
      if (av == 0.0) {
        // Still deterministic: skipping exact zeros cannot change sums.
        continue;
      }
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T, row-major dot products.
inline void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                          std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
      c[i * n + j] += acc;
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
inline void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                          std::size_t n) {
  for (std::size_t t = 0; t < k; ++t) {
    const double* arow = a + t * m;
    const double* brow = b + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b, const char* tag = "tensor") {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n}, tag);
  detail::matmul_acc(a.value().data(), b.value().data(), out.mutable_value().data(), m, k, n);
  flops_add(2ull * m * k * n);
  if (detail::should_record({&a, &b})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), bd = b.ptr(), od = out.ptr(), m, k, n]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*ad))
                       detail::matmul_nt_acc(od->grad.data(), bd->value.data(), g->data(), m, n, k);
                     if (auto* g = detail::grad_target(*bd))
                       detail::matmul_tn_acc(ad->value.data(), od->grad.data(), g->data(), k, m, n);
                   },
                   out.ptr(),
                   {a.ptr(), b.ptr()}});
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: need 2-d tensor, got " + shape_string(a.shape()));
  std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m});
  const auto& av = a.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  if (detail::should_record({&a})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), od = out.ptr(), m, n]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*ad))
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += od->grad[j * m + i];
                   },
                   out.ptr(),
                   {a.ptr()}});
  }
  return out;
}

// Same data, new shape. Implemented as a copy with pass-through gradient.
inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  Tensor out = Tensor::from(std::move(shape), a.value());
  if (detail::should_record({&a})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), od = out.ptr()]() {
                     if (od->grad.empty()) return;
                     detail::accum_all(*ad, od->grad);
                   },
                   out.ptr(),
                   {a.ptr()}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
// tanh-approximation constants for GELU: sqrt(2/pi) and the cubic coefficient.
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluK = 0.044715;
}  // namespace detail

inline Tensor gelu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    double x = av[i];
    double u = detail::kGeluC * (x + detail::kGeluK * x * x * x);
    ov[i] = 0.5 * x * (1.0 + std::tanh(u));
  }
  flops_add(8 * ov.size());
  if (detail::should_record({&a})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), od = out.ptr()]() {
                     if (od->grad.empty()) return;
                     auto* g = detail::grad_target(*ad);
                     if (!g) return;
                     for (std::size_t i = 0; i < g->size(); ++i) {
                       double x = ad->value[i];
                       double u = detail::kGeluC * (x + detail::kGeluK * x * x * x);
                       double th = std::tanh(u);
                       double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluK * x * x);
                       double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                       (*g)[i] += od->grad[i] * d;
                     }
                   },
                   out.ptr(),
                   {a.ptr()}});
  }
  return out;
}

inline Tensor softplus(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    double x = av[i];
    // log(1+e^x) with overflow guard
    ov[i] = x > 30.0 ? x : std::log1p(std::exp(x));
  }
  flops_add(3 * ov.size());
  if (detail::should_record({&a})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), od = out.ptr()]() {
                     if (od->grad.empty()) return;
                     auto* g = detail::grad_target(*ad);
                     if (!g) return;
                     for (std::size_t i = 0; i < g->size(); ++i) {
                       double x = ad->value[i];
                       double s = 1.0 / (1.0 + std::exp(-x));
                       (*g)[i] += od->grad[i] * s;
                     }
                   },
                   out.ptr(),
                   {a.ptr()}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

namespace detail {

// Shared forward for full and causal row softmax. Row i normalizes over
// columns [0, limit(i)).
template <typename LimitFn>
inline void softmax_forward(const std::vector<double>& x, std::vector<double>& y, std::size_t n,
                            std::size_t d, double temperature, LimitFn limit) {
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t lim = limit(i);
    const double* row = x.data() + i * d;
    double* orow = y.data() + i * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < lim; ++j) {
      orow[j] = std::exp((row[j] - mx) / temperature);
      z += orow[j];
    }
    for (std::size_t j = 0; j < lim; ++j) orow[j] /= z;
    for (std::size_t j = lim; j < d; ++j) orow[j] = 0.0;
  }
}

template <typename LimitFn>
inline void softmax_backward(const std::vector<double>& y, const std::vector<double>& dy,
                             std::vector<double>& dx, std::size_t n, std::size_t d, double temperature,
                             LimitFn limit) {
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t lim = limit(i);
    const double* yrow = y.data() + i * d;
    const double* dyrow = dy.data() + i * d;
    double dot = 0.0;
    for (std::size_t j = 0; j < lim; ++j) dot += dyrow[j] * yrow[j];
    for (std::size_t j = 0; j < lim; ++j) dx[i * d + j] += yrow[j] * (dyrow[j] - dot) / temperature;
  }
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& x, double temperature = 1.0) {
  if (temperature <= 0.0)
    throw ParameterError("softmax temperature must be positive, got " + std::to_string(temperature));
  if (x.ndim() != 2) throw DimensionError("softmax_rows: need 2-d tensor, got " + shape_string(x.shape()));
  std::size_t n = x.rows(), d = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  detail::softmax_forward(x.value(), out.mutable_value(), n, d, temperature, [d](std::size_t) { return d; });
  flops_add(5 * n * d);
  if (detail::should_record({&x})) {
    out.set_requires_grad();
    tape().record({[xd = x.ptr(), od = out.ptr(), n, d, temperature]() {
                     if (od->grad.empty()) return;
                     auto* g = detail::grad_target(*xd);
                     if (!g) return;
                     detail::softmax_backward(od->value, od->grad, *g, n, d, temperature,
                                              [d](std::size_t) { return d; });
                   },
                   out.ptr(),
                   {x.ptr()}});
  }
  return out;
}

// Row i of a [t x t] score matrix attends to columns 0..i. Masked entries
// are exactly zero in the output and receive no gradient.
inline Tensor causal_softmax_rows(const Tensor& x, double temperature = 1.0) {
  if (temperature <= 0.0)
    throw ParameterError("softmax temperature must be positive, got " + std::to_string(temperature));
  if (x.ndim() != 2 || x.rows() != x.cols())
    throw DimensionError("causal_softmax_rows: need square matrix, got " + shape_string(x.shape()));
  std::size_t n = x.rows(), d = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  detail::softmax_forward(x.value(), out.mutable_value(), n, d, temperature,
                          [](std::size_t i) { return i + 1; });
  flops_add(5 * n * (n + 1) / 2);
  if (detail::should_record({&x})) {
    out.set_requires_grad();
    tape().record({[xd = x.ptr(), od = out.ptr(), n, d, temperature]() {
                     if (od->grad.empty()) return;
                     auto* g = detail::grad_target(*xd);
                     if (!g) return;
                     detail::softmax_backward(od->value, od->grad, *g, n, d, temperature,
                                              [](std::size_t i) { return i + 1; });
                   },
                   out.ptr(),
                   {x.ptr()}});
  }
  return out;
}

// Per-row normalization over the last dimension: y = gain * (x - mu) / sqrt(var + eps) + bias.
// Population variance, matching the usual transformer formulation.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  if (eps <= 0.0) throw ParameterError("layer_norm eps must be positive");
  if (x.ndim() != 2) throw DimensionError("layer_norm: need 2-d tensor, got " + shape_string(x.shape()));
  std::size_t n = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: feature width " + std::to_string(d) + " vs gain " +
                         shape_string(gain.shape()) + ", bias " + shape_string(bias.shape()));
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  auto& ov = out.mutable_value();
  std::vector<double> inv_sigma(n), mu(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xv.data() + i * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    mu[i] = m;
    inv_sigma[i] = is;
    for (std::size_t j = 0; j < d; ++j) ov[i * d + j] = gv[j] * (row[j] - m) * is + bv[j];
  }
  flops_add(8 * n * d);
  if (detail::should_record({&x, &gain, &bias})) {
    out.set_requires_grad();
    tape().record(
        {[xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr(), n, d, mu, inv_sigma]() {
           if (od->grad.empty()) return;
           const auto& dy = od->grad;
           for (std::size_t i = 0; i < n; ++i) {
             const double* xrow = xd->value.data() + i * d;
             const double* dyrow = dy.data() + i * d;
             double is = inv_sigma[i];
             // dxhat_j = dy_j * gain_j ; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
             double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
             for (std::size_t j = 0; j < d; ++j) {
               double xhat = (xrow[j] - mu[i]) * is;
               double dxhat = dyrow[j] * gd->value[j];
               mean_dxhat += dxhat;
               mean_dxhat_xhat += dxhat * xhat;
             }
             mean_dxhat /= static_cast<double>(d);
             mean_dxhat_xhat /= static_cast<double>(d);
             if (auto* g = detail::grad_target(*xd)) {
               for (std::size_t j = 0; j < d; ++j) {
                 double xhat = (xrow[j] - mu[i]) * is;
                 double dxhat = dyrow[j] * gd->value[j];
                 (*g)[i * d + j] += is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
               }
             }
             if (auto* g = detail::grad_target(*gd))
               for (std::size_t j = 0; j < d; ++j)
                 (*g)[j] += dyrow[j] * (xrow[j] - mu[i]) * is;
             if (auto* g = detail::grad_target(*bd))
               for (std::size_t j = 0; j < d; ++j) (*g)[j] += dyrow[j];
           }
         },
         out.ptr(),
         {x.ptr(), gain.ptr(), bias.ptr()}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  Tensor out = Tensor::zeros({1});
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  out.mutable_value()[0] = acc;
  flops_add(a.numel());
  if (detail::should_record({&a})) {
    out.set_requires_grad();
    tape().record({[ad = a.ptr(), od = out.ptr()]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*ad))
                       for (double& gi : *g) gi += od->grad[0];
                   },
                   out.ptr(),
                   {a.ptr()}});
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  double inv = 1.0 / static_cast<double>(a.numel());
  return scale(sum(a), inv);
}

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  detail::check_same_shape(pred, target, "mse_loss");
  std::size_t n = pred.numel();
  Tensor out = Tensor::zeros({1});
  double acc = 0.0;
  const auto& pv = pred.value();
  const auto& tv = target.value();
  for (std::size_t i = 0; i < n; ++i) {
    double e = pv[i] - tv[i];
    acc += e * e;
  }
  out.mutable_value()[0] = acc / static_cast<double>(n);
  flops_add(3 * n);
  if (detail::should_record({&pred, &target})) {
    out.set_requires_grad();
    tape().record({[pd = pred.ptr(), td = target.ptr(), od = out.ptr(), n]() {
                     if (od->grad.empty()) return;
                     double s = 2.0 * od->grad[0] / static_cast<double>(n);
                     if (auto* g = detail::grad_target(*pd))
                       for (std::size_t i = 0; i < n; ++i) (*g)[i] += s * (pd->value[i] - td->value[i]);
                     if (auto* g = detail::grad_target(*td))
                       for (std::size_t i = 0; i < n; ++i) (*g)[i] -= s * (pd->value[i] - td->value[i]);
                   },
                   out.ptr(),
                   {pred.ptr(), target.ptr()}});
  }
  return out;
}

// Mean next-token cross entropy over the positions where mask is true.
// logits: [n x V], targets: n token ids, mask: n flags.
inline Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                                   const std::vector<bool>& mask) {
  if (logits.ndim() != 2) throw DimensionError("masked_cross_entropy: logits must be 2-d");
  std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n || mask.size() != n)
    throw DimensionError("masked_cross_entropy: " + std::to_string(n) + " rows vs " +
                         std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) +
                         " mask flags");
  std::size_t m = 0;
  for (bool b : mask) m += b ? 1 : 0;
  if (m == 0) throw ContractError("masked_cross_entropy: mask selects no positions");
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i] && (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v))
      throw ContractError("masked_cross_entropy: target id out of vocabulary");

  Tensor out = Tensor::zeros({1});
  const auto& lv = logits.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double* row = lv.data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    acc += std::log(z) + mx - row[static_cast<std::size_t>(targets[i])];
  }
  out.mutable_value()[0] = acc / static_cast<double>(m);
  flops_add(4 * m * v);
  if (detail::should_record({&logits})) {
    out.set_requires_grad();
    tape().record({[ld = logits.ptr(), od = out.ptr(), targets, mask, n, v, m]() {
                     if (od->grad.empty()) return;
                     auto* g = detail::grad_target(*ld);
                     if (!g) return;
                     double s = od->grad[0] / static_cast<double>(m);
                     for (std::size_t i = 0; i < n; ++i) {
                       if (!mask[i]) continue;
                       const double* row = ld->value.data() + i * v;
                       double mx = row[0];
                       for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                       double z = 0.0;
                       for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
                       for (std::size_t j = 0; j < v; ++j) {
                         double p = std::exp(row[j] - mx) / z;
                         (*g)[i * v + j] += s * (p - (static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0));
                       }
                     }
                   },
                   out.ptr(),
                   {logits.ptr()}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slicing / assembly
// ---------------------------------------------------------------------------

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  if (x.ndim() != 2 || r0 > r1 || r1 > x.rows())
    throw DimensionError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " +
                         shape_string(x.shape()));
  std::size_t d = x.cols(), n = r1 - r0;
  Tensor out = Tensor::zeros({n, d});
  std::copy(x.value().begin() + r0 * d, x.value().begin() + r1 * d, out.mutable_value().begin());
  if (detail::should_record({&x})) {
    out.set_requires_grad();
    tape().record({[xd = x.ptr(), od = out.ptr(), r0, n, d]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*xd))
                       for (std::size_t i = 0; i < n * d; ++i) (*g)[r0 * d + i] += od->grad[i];
                   },
                   out.ptr(),
                   {x.ptr()}});
  }
  return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  if (x.ndim() != 2 || c0 > c1 || c1 > x.cols())
    throw DimensionError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                         shape_string(x.shape()));
  std::size_t n = x.rows(), d = x.cols(), w = c1 - c0;
  Tensor out = Tensor::zeros({n, w});
  const auto& xv = x.value();
  auto& ov = out.mutable_value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) ov[i * w + j] = xv[i * d + c0 + j];
  if (detail::should_record({&x})) {
    out.set_requires_grad();
    tape().record({[xd = x.ptr(), od = out.ptr(), c0, n, d, w]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*xd))
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < w; ++j) (*g)[i * d + c0 + j] += od->grad[i * w + j];
                   },
                   out.ptr(),
                   {x.ptr()}});
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  std::size_t d = parts[0].cols(), n = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.cols() != d)
      throw DimensionError("concat_rows: width mismatch, " + shape_string(p.shape()));
    n += p.rows();
  }
  Tensor out = Tensor::zeros({n, d});
  auto& ov = out.mutable_value();
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.value().begin(), p.value().end(), ov.begin() + off);
    off += p.numel();
  }
  bool rec = grad_mode() && std::any_of(parts.begin(), parts.end(),
                                        [](const Tensor& t) { return t.requires_grad(); });
  if (rec) {
    out.set_requires_grad();
    std::vector<std::shared_ptr<TensorData>> inputs;
    for (const Tensor& p : parts) inputs.push_back(p.ptr());
    tape().record({[inputs, od = out.ptr()]() {
                     if (od->grad.empty()) return;
                     std::size_t off = 0;
                     for (const auto& inp : inputs) {
                       if (auto* g = detail::grad_target(*inp))
                         for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += od->grad[off + i];
                       off += inp->numel();
                     }
                   },
                   out.ptr(), inputs});
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  std::size_t n = parts[0].rows(), d = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.rows() != n)
      throw DimensionError("concat_cols: row mismatch, " + shape_string(p.shape()));
    d += p.cols();
  }
  Tensor out = Tensor::zeros({n, d});
  auto& ov = out.mutable_value();
  std::size_t coff = 0;
  for (const Tensor& p : parts) {
    std::size_t w = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) ov[i * d + coff + j] = p.value()[i * w + j];
    coff += w;
  }
  bool rec = grad_mode() && std::any_of(parts.begin(), parts.end(),
                                        [](const Tensor& t) { return t.requires_grad(); });
  if (rec) {
    out.set_requires_grad();
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
      inputs.push_back(p.ptr());
      widths.push_back(p.cols());
    }
    tape().record({[inputs, widths, od = out.ptr(), n, d]() {
                     if (od->grad.empty()) return;
                     std::size_t coff = 0;
                     for (std::size_t k = 0; k < inputs.size(); ++k) {
                       std::size_t w = widths[k];
                       if (auto* g = detail::grad_target(*inputs[k]))
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < w; ++j)
                             (*g)[i * w + j] += od->grad[i * d + coff + j];
                       coff += w;
                     }
                   },
                   out.ptr(), inputs});
  }
  return out;
}

// Pure element permutation / gather: out.data[i] = x.data[src[i]]. Gradient
// scatters back through src, so repeated indices accumulate.
inline Tensor gather_elements(const Tensor& x, const std::vector<std::size_t>& src,
                              std::vector<std::size_t> out_shape) {
  if (shape_numel(out_shape) != src.size())
    throw DimensionError("gather_elements: index count does not match output shape");
  for (std::size_t s : src)
    if (s >= x.numel()) throw DimensionError("gather_elements: index out of range");
  Tensor out = Tensor::zeros(std::move(out_shape));
  auto& ov = out.mutable_value();
  const auto& xv = x.value();
  for (std::size_t i = 0; i < src.size(); ++i) ov[i] = xv[src[i]];
  if (detail::should_record({&x})) {
    out.set_requires_grad();
    tape().record({[xd = x.ptr(), od = out.ptr(), src]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*xd))
                       for (std::size_t i = 0; i < src.size(); ++i) (*g)[src[i]] += od->grad[i];
                   },
                   out.ptr(),
                   {x.ptr()}});
  }
  return out;
}

// Row gather from an embedding table: out[i] = table[ids[i]].
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw DimensionError("embedding_lookup: table must be 2-d");
  std::size_t v = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw ContractError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                          std::to_string(v));
  Tensor out = Tensor::zeros({ids.size(), d});
  auto& ov = out.mutable_value();
  const auto& tv = table.value();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.begin() + static_cast<std::size_t>(ids[i]) * d,
              tv.begin() + (static_cast<std::size_t>(ids[i]) + 1) * d, ov.begin() + i * d);
  if (detail::should_record({&table})) {
    out.set_requires_grad();
    tape().record({[td = table.ptr(), od = out.ptr(), ids, d]() {
                     if (od->grad.empty()) return;
                     if (auto* g = detail::grad_target(*td))
                       for (std::size_t i = 0; i < ids.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j)
                           (*g)[static_cast<std::size_t>(ids[i]) * d + j] += od->grad[i * d + j];
                   },
                   out.ptr(),
                   {table.ptr()}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer step. Plain SGD, applied between tape resets; mutating leaf
// values directly is safe because no recorded node references them afterward.
// ---------------------------------------------------------------------------

inline void sgd_step(Tensor& param, double lr) {
  if (!param.requires_grad() || !param.has_grad()) return;
  auto& v = param.mutable_value();
  const auto& g = param.grad();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
}

}  // namespace tvlm
