#pragma once

// Reverse-mode automatic differentiation over dense 2-D tensors.
//
// Operations executed while a Tape is active (see TapeScope) and touching at
// least one tensor that requires gradients are recorded in execution order.
// Outside a tape every operation is a plain value computation, which is how
// the inference path runs the same model code without bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "airdual/errors.hpp"
#include "airdual/matrix.hpp"

namespace airdual::ad {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tape {
 public:
  void record(std::shared_ptr<Node> n) { nodes_.push_back(std::move(n)); }
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  const std::vector<std::shared_ptr<Node>>& nodes() const noexcept { return nodes_; }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

/// Makes `tape` the recording target of this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeScope() { detail::active_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording, e.g. for inference inside a training step.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor constant(std::size_t rows, std::size_t cols, std::vector<double> data) {
    if (data.size() != rows * cols) throw ShapeError("tensor data length does not match shape");
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(data);
    return Tensor(std::move(n));
  }
  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return constant(rows, cols, std::vector<double>(rows * cols, 0.0));
  }
  static Tensor full(std::size_t rows, std::size_t cols, double v) {
    return constant(rows, cols, std::vector<double>(rows * cols, v));
  }
  static Tensor scalar(double v) { return constant(1, 1, {v}); }
  static Tensor column(std::vector<double> v) {
    const auto n = v.size();
    return constant(n, 1, std::move(v));
  }
  static Tensor from(const Matrix& m) { return constant(m.rows(), m.cols(), m.data()); }
  /// Leaf that accumulates gradients.
  static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<double> data) {
    Tensor t = constant(rows, cols, std::move(data));
    t.node_->requires_grad = true;
    t.node_->ensure_grad();
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> value() const { return node_->value; }
  std::span<double> mutable_value() { return node_->value; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on a non-scalar tensor");
    return node_->value[0];
  }
  double at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

  std::span<const double> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  Matrix to_matrix() const { return Matrix(rows(), cols(), node_->value); }
  std::vector<double> to_vector() const { return node_->value; }

  /// Same values, cut from the graph.
  Tensor detach() const { return constant(rows(), cols(), node_->value); }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (active_tape == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Wraps a computed value as a tensor, recording it when needed.
inline Tensor make_result(std::size_t rows, std::size_t cols, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  if (recording(inputs)) {
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->backward_fn = std::move(backward);
    active_tape->record(n);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_n(std::size_t rows, std::size_t cols, std::vector<double> value,
                            const std::vector<Tensor>& inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (active_tape != nullptr && any) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(backward);
    active_tape->record(n);
  }
  return Tensor(std::move(n));
}

/// Gradient buffer of a parent, or nullptr when it does not need one.
inline double* grad_of(Node& out, std::size_t k) {
  Node& p = *out.parents[k];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shapes " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + " differ");
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> v(x.size());
  const auto xv = x.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(xv[i]);
  return make_result(x.rows(), x.cols(), std::move(v), {&x}, [df](Node& out) {
    double* gx = grad_of(out, 0);
    if (!gx) return;
    const auto& xv = out.parents[0]->value;
    for (std::size_t i = 0; i < out.value.size(); ++i) gx[i] += out.grad[i] * df(xv[i], out.value[i]);
  });
}

}  // namespace detail

/// Seeds d(loss)/d(loss) = 1 and propagates through `tape` in exact reverse
/// recording order. Leaf parameters accumulate across calls; intermediate
/// gradients are reset on every call.
inline void backward(Tape& tape, const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
  const auto& nodes = tape.nodes();
  std::size_t pos = nodes.size();
  for (std::size_t i = nodes.size(); i-- > 0;)
    if (nodes[i] == loss.node()) {
      pos = i;
      break;
    }
  if (pos == nodes.size()) throw ShapeError("backward: loss was not recorded on this tape");
  for (std::size_t i = 0; i <= pos; ++i) nodes[i]->grad.assign(nodes[i]->value.size(), 0.0);
  nodes[pos]->grad[0] = 1.0;
  for (std::size_t i = pos + 1; i-- > 0;) {
    Node& n = *nodes[i];
    if (n.backward_fn) n.backward_fn(n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(v), {&a, &b}, [](Node& out) {
    for (std::size_t k = 0; k < 2; ++k)
      if (double* g = detail::grad_of(out, k))
        for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
  });
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(v), {&a, &b}, [](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    if (double* g = detail::grad_of(out, 1))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] -= out.grad[i];
  });
}

/// Elementwise (Hadamard) product.
inline Tensor operator*(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(v), {&a, &b}, [](Node& out) {
    const auto& av = out.parents[0]->value;
    const auto& bv = out.parents[1]->value;
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * bv[i];
    if (double* g = detail::grad_of(out, 1))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * av[i];
  });
}

inline Tensor operator*(double s, const Tensor& x) {
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = s * x.value()[i];
  return detail::make_result(x.rows(), x.cols(), std::move(v), {&x}, [s](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += s * out.grad[i];
  });
}
inline Tensor operator*(const Tensor& x, double s) { return s * x; }
inline Tensor operator-(const Tensor& x) { return -1.0 * x; }

inline Tensor operator+(const Tensor& x, double s) {
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.value()[i] + s;
  return detail::make_result(x.rows(), x.cols(), std::move(v), {&x}, [](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
  });
}
inline Tensor operator+(double s, const Tensor& x) { return x + s; }
inline Tensor operator-(const Tensor& x, double s) { return x + (-s); }
inline Tensor operator-(double s, const Tensor& x) { return (-x) + s; }

/// y + h * k in one recorded node; used by the RK4 stages.
inline Tensor add_scaled(const Tensor& y, double h, const Tensor& k) {
  detail::same_shape(y, k, "add_scaled");
  std::vector<double> v(y.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = y.value()[i] + h * k.value()[i];
  return detail::make_result(y.rows(), y.cols(), std::move(v), {&y, &k}, [h](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    if (double* g = detail::grad_of(out, 1))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += h * out.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}
inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}
inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor abs(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::abs(v); },
                       [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}
inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}
inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Tensor sqrt(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.value()) s += v;
  return detail::make_result(1, 1, {s}, {&x}, [](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.parents[0]->value.size(); ++i) g[i] += out.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return (1.0 / static_cast<double>(x.size())) * sum(x); }

/// Sum along each row: (r, c) -> (r, 1).
inline Tensor sum_rows(const Tensor& x) {
  const auto r = x.rows(), c = x.cols();
  std::vector<double> v(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i] += x.value()[i * c + j];
  return detail::make_result(r, 1, std::move(v), {&x}, [c](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " by " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> v(m * n, 0.0);
  const auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      double* crow = v.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  return detail::make_result(m, n, std::move(v), {&a, &b}, [m, k, n](Node& out) {
    const auto& av = out.parents[0]->value;
    const auto& bv = out.parents[1]->value;
    const double* gc = out.grad.data();
    if (double* ga = detail::grad_of(out, 0)) {
      // ga += gc * b^T, with b^T laid out contiguously for the inner loop.
      std::vector<double> bt(k * n);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bv[p * n + j];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = gc[i * n + j];
          if (g == 0.0) continue;
          const double* brow = bt.data() + j * k;
          double* arow = ga + i * k;
          for (std::size_t p = 0; p < k; ++p) arow[p] += g * brow[p];
        }
    }
    if (double* gb = detail::grad_of(out, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * gc[i * n + j];
        }
  });
}

inline Tensor transpose(const Tensor& x) {
  const auto r = x.rows(), c = x.cols();
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = x.value()[i * c + j];
  return detail::make_result(c, r, std::move(v), {&x}, [r, c](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.grad[j * r + i];
  });
}

inline Tensor reshape(const Tensor& x, std::size_t rows, std::size_t cols) {
  if (rows * cols != x.size()) throw ShapeError("reshape: element count differs");
  return detail::make_result(rows, cols, x.to_vector(), {&x}, [](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
  });
}

/// X (r, c) + b (1, c), broadcast over rows.
inline Tensor add_row(const Tensor& x, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  const auto r = x.rows(), c = x.cols();
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = x.value()[i * c + j] + b.value()[j];
  return detail::make_result(r, c, std::move(v), {&x, &b}, [r, c](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    if (double* g = detail::grad_of(out, 1))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += out.grad[i * c + j];
  });
}

/// X (r, c) * s (r, 1), each row scaled by its entry.
inline Tensor mul_col(const Tensor& x, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != x.rows()) throw ShapeError("mul_col: scale must be rows x 1");
  const auto r = x.rows(), c = x.cols();
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = x.value()[i * c + j] * s.value()[i];
  return detail::make_result(r, c, std::move(v), {&x, &s}, [r, c](Node& out) {
    const auto& xv = out.parents[0]->value;
    const auto& sv = out.parents[1]->value;
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.grad[i * c + j] * sv[i];
    if (double* g = detail::grad_of(out, 1))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i] += out.grad[i * c + j] * xv[i * c + j];
  });
}

/// Scalar (1, 1) times every element of x.
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("scale_by: scale must be a scalar");
  const double sv = s.item();
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.value()[i] * sv;
  return detail::make_result(x.rows(), x.cols(), std::move(v), {&x, &s}, [](Node& out) {
    const auto& xv = out.parents[0]->value;
    const double sv = out.parents[1]->value[0];
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * sv;
    if (double* g = detail::grad_of(out, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < out.grad.size(); ++i) acc += out.grad[i] * xv[i];
      g[0] += acc;
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const auto r = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    c += p.cols();
  }
  std::vector<double> v(r * c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) v[i * c + off + j] = p.value()[i * p.cols() + j];
    off += p.cols();
  }
  return detail::make_result_n(r, c, std::move(v), parts, [widths, r, c](Node& out) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (double* g = detail::grad_of(out, k))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += out.grad[i * c + off + j];
      off += widths[k];
    }
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const auto c = parts[0].cols();
  std::vector<double> v;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column counts differ");
    v.insert(v.end(), p.value().begin(), p.value().end());
    sizes.push_back(p.size());
  }
  const auto r = v.size() / c;
  return detail::make_result_n(r, c, std::move(v), parts, [sizes](Node& out) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (double* g = detail::grad_of(out, k))
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += out.grad[off + i];
      off += sizes[k];
    }
  });
}

/// Columns [begin, begin + count).
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.cols()) throw ShapeError("slice_cols: range out of bounds");
  const auto r = x.rows(), c = x.cols();
  std::vector<double> v(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) v[i * count + j] = x.value()[i * c + begin + j];
  return detail::make_result(r, count, std::move(v), {&x}, [r, c, begin, count](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * c + begin + j] += out.grad[i * count + j];
  });
}

/// Rows [begin, begin + count).
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.rows()) throw ShapeError("slice_rows: range out of bounds");
  const auto c = x.cols();
  std::vector<double> v(x.value().begin() + static_cast<std::ptrdiff_t>(begin * c),
                        x.value().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return detail::make_result(count, c, std::move(v), {&x}, [begin, c](Node& out) {
    if (double* g = detail::grad_of(out, 0))
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[begin * c + i] += out.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Fused operations

/// Row-wise softmax over entries where mask is non-zero; masked entries are 0.
inline Tensor masked_softmax(const Tensor& logits, const std::vector<std::uint8_t>& mask) {
  const auto r = logits.rows(), c = logits.cols();
  if (mask.size() != r * c) throw ShapeError("masked_softmax: mask shape differs from logits");
  std::vector<double> v(r * c, 0.0);
  const auto lv = logits.value();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) mx = std::max(mx, lv[i * c + j]);
    if (mx == -std::numeric_limits<double>::infinity())
      throw DegenerateInputError("masked_softmax: row " + std::to_string(i) + " is fully masked (isolated node)");
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) z += (v[i * c + j] = std::exp(lv[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= z;
  }
  return detail::make_result(r, c, std::move(v), {&logits}, [r, c](Node& out) {
    double* g = detail::grad_of(out, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += out.value[i * c + j] * out.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.value[i * c + j] * (out.grad[i * c + j] - dot);
    }
  });
}

/// Each row divided by (its Euclidean norm + eps).
inline Tensor row_normalize(const Tensor& x, double eps = 1e-12) {
  const auto r = x.rows(), c = x.cols();
  std::vector<double> v(x.size());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x.value()[i * c + j] * x.value()[i * c + j];
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = x.value()[i * c + j] / (norms[i] + eps);
  }
  return detail::make_result(r, c, std::move(v), {&x}, [r, c, eps, norms](Node& out) {
    double* g = detail::grad_of(out, 0);
    if (!g) return;
    const auto& xv = out.parents[0]->value;
    for (std::size_t i = 0; i < r; ++i) {
      const double s = norms[i] + eps;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += xv[i * c + j] * out.grad[i * c + j];
      const double k = norms[i] > 0.0 ? dot / (s * s * norms[i]) : 0.0;
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.grad[i * c + j] / s - k * xv[i * c + j];
    }
  });
}

}  // namespace airdual::ad
