#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to storage (shape, values, optional grad).
// Operations are methods on a Tape, which records one node per operation
// whose output requires a gradient. Tape::backward walks the recorded nodes
// in reverse order and accumulates gradients additively into every input
// that requires one.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "attrface/errors.hpp"

namespace attrface {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

enum class OpKind {
  matmul,
  add,
  mul,
  relu,
  scale,
  concat,
  slice,
  transpose,
  l2_normalize_rows,
  log_sum_exp_rows,
  sigmoid,
  sum,
  sum_rows,
  mean,
  grl,
  bce_with_logits,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::relu: return "relu";
    case OpKind::scale: return "scale";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::transpose: return "transpose";
    case OpKind::l2_normalize_rows: return "l2_normalize_rows";
    case OpKind::log_sum_exp_rows: return "log_sum_exp_rows";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::sum: return "sum";
    case OpKind::sum_rows: return "sum_rows";
    case OpKind::mean: return "mean";
    case OpKind::grl: return "grl";
    case OpKind::bce_with_logits: return "bce_with_logits";
  }
  return "unknown";
}

/// Rows with a Euclidean norm below this are rejected by l2_normalize_rows.
inline constexpr double kMinRowNorm = 1e-6;

template <std::floating_point T>
class Tape;

template <std::floating_point T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty when absent
  bool requires_grad = false;
  // Set when the tensor is the output of a recorded node.
  std::uint64_t tape_id = 0;
  std::uint64_t tape_generation = 0;
  std::size_t node_index = 0;
};

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    if (shape.empty()) throw ShapeError("tensor: shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_string(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->values.size(); }

  /// Row count when viewed as a matrix over the last axis.
  std::size_t rows() const { return numel() / cols(); }
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<const T> values() const { return impl_->values; }
  std::span<T> mutable_values() { return impl_->values; }
  T operator[](std::size_t i) const { return impl_->values[i]; }
  T at(std::size_t r, std::size_t c) const { return impl_->values[r * cols() + c]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_string(shape()) + " is not a scalar");
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->tape_id == 0; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Deep copy of shape and values with no gradient and no tape linkage.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(impl_->shape, impl_->values, requires_grad);
  }

 private:
  friend class Tape<T>;

  TensorStorage<T>& storage() const { return *impl_; }

  std::vector<T>& grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), T(0));
    return impl_->grad;
  }

  std::shared_ptr<TensorStorage<T>> impl_;
};

/// A named trainable leaf tensor.
template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;

  Parameter() = default;
  Parameter(std::string n, Shape shape, std::vector<T> values)
      : name(std::move(n)), tensor(std::move(shape), std::move(values), true) {}
};

/// Extra scalar arguments for the kinds that take them.
struct OpAttrs {
  double factor = 1.0;     // scale, grl
  std::size_t begin = 0;   // slice
  std::size_t end = 0;     // slice
};

namespace kernels {

// out[m,n] += a[m,k] * b[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* out) {
  for (std::size_t i = 0; i < m; ++i) {
    T* out_row = out + i * n;
    const T* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a_row[p];
      if (av == T(0)) continue;
      const T* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

// out[k,n] += a[m,k]^T * g[m,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* g, T* out) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a_row = a + i * k;
    const T* g_row = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a_row[p];
      if (av == T(0)) continue;
      T* out_row = out + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * g_row[j];
    }
  }
}

template <class T>
std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* src) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

}  // namespace kernels

template <std::floating_point T>
class Tape {
 public:
  using TensorT = Tensor<T>;

  struct Node {
    OpKind kind;
    std::vector<TensorT> inputs;
    TensorT output;
    std::function<void(const Node&)> backward;
  };

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  /// When disabled, operations compute values only and record nothing.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Drops every recorded node so the tape can be reused for a new forward pass.
  void reset() {
    nodes_.clear();
    ++generation_;
    backward_done_ = false;
  }

  // Generic entry point over OpKind; the named methods below are equivalent.
  TensorT apply(OpKind kind, std::span<const TensorT> in, const OpAttrs& attrs = {}) {
    auto arity = [&](std::size_t n) {
      if (in.size() != n) {
        throw ShapeError(std::string(op_name(kind)) + ": expects " + std::to_string(n) +
                         " inputs, got " + std::to_string(in.size()));
      }
    };
    switch (kind) {
      case OpKind::matmul: arity(2); return matmul(in[0], in[1]);
      case OpKind::add: arity(2); return add(in[0], in[1]);
      case OpKind::mul: arity(2); return mul(in[0], in[1]);
      case OpKind::relu: arity(1); return relu(in[0]);
      case OpKind::scale: arity(1); return scale(in[0], static_cast<T>(attrs.factor));
      case OpKind::concat: return concat(in);
      case OpKind::slice: arity(1); return slice(in[0], attrs.begin, attrs.end);
      case OpKind::transpose: arity(1); return transpose(in[0]);
      case OpKind::l2_normalize_rows: arity(1); return l2_normalize_rows(in[0]);
      case OpKind::log_sum_exp_rows: arity(1); return log_sum_exp_rows(in[0]);
      case OpKind::sigmoid: arity(1); return sigmoid(in[0]);
      case OpKind::sum: arity(1); return sum(in[0]);
      case OpKind::sum_rows: arity(1); return sum_rows(in[0]);
      case OpKind::mean: arity(1); return mean(in[0]);
      case OpKind::grl: arity(1); return grl(in[0], static_cast<T>(attrs.factor));
      case OpKind::bce_with_logits: arity(3); return bce_with_logits(in[0], in[1], in[2]);
    }
    throw ShapeError("apply: unknown operation kind");
  }

  TensorT matmul(const TensorT& a, const TensorT& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) mismatch(OpKind::matmul, a, b);
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<T> out(m * n, T(0));
    kernels::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
    return record(OpKind::matmul, {a, b}, {m, n}, std::move(out), [m, k, n](const Node& node) {
      const auto& g = node.output.grad();
      const auto& a = node.inputs[0];
      const auto& b = node.inputs[1];
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        const auto bt = kernels::transposed(k, n, b.values().data());
        kernels::gemm_nn(m, n, k, g.data(), bt.data(), ga.data());
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        kernels::gemm_tn(m, k, n, a.values().data(), g.data(), gb.data());
      }
    });
  }

  /// Elementwise sum. `b` may also be a row vector ([n] or [1,n]) broadcast
  /// over the rows of `a`, or a single value broadcast everywhere.
  TensorT add(const TensorT& a, const TensorT& b) {
    enum class Mode { same, row, scalar } mode;
    if (a.shape() == b.shape()) {
      mode = Mode::same;
    } else if (b.numel() == 1) {
      mode = Mode::scalar;
    } else if (b.numel() == a.cols() && (b.rank() == 1 || (b.rank() == 2 && b.shape()[0] == 1))) {
      mode = Mode::row;
    } else {
      mismatch(OpKind::add, a, b);
    }
    const std::size_t n = a.numel(), cols = a.cols();
    std::vector<T> out(a.values().begin(), a.values().end());
    const auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i) {
      out[i] += mode == Mode::same ? bv[i] : mode == Mode::row ? bv[i % cols] : bv[0];
    }
    return record(OpKind::add, {a, b}, a.shape(), std::move(out), [mode, n, cols](const Node& node) {
      const auto& g = node.output.grad();
      const auto& a = node.inputs[0];
      const auto& b = node.inputs[1];
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          gb[mode == Mode::same ? i : mode == Mode::row ? i % cols : 0] += g[i];
        }
      }
    });
  }

  TensorT mul(const TensorT& a, const TensorT& b) {
    if (a.shape() != b.shape()) mismatch(OpKind::mul, a, b);
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    return record(OpKind::mul, {a, b}, a.shape(), std::move(out), [n](const Node& node) {
      const auto& g = node.output.grad();
      const auto& a = node.inputs[0];
      const auto& b = node.inputs[1];
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a[i];
      }
    });
  }

  TensorT relu(const TensorT& a) {
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
    return record(OpKind::relu, {a}, a.shape(), std::move(out), [n](const Node& node) {
      const auto& g = node.output.grad();
      const auto& a = node.inputs[0];
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        if (a[i] > T(0)) ga[i] += g[i];
      }
    });
  }

  TensorT scale(const TensorT& a, T factor) {
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = factor * a[i];
    return record(OpKind::scale, {a}, a.shape(), std::move(out), [n, factor](const Node& node) {
      const auto& g = node.output.grad();
      auto& ga = node.inputs[0].grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += factor * g[i];
    });
  }

  /// Concatenation along the last axis; all inputs share the leading shape.
  TensorT concat(std::span<const TensorT> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t rows = parts[0].rows();
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
      Shape pl(p.shape().begin(), p.shape().end() - 1);
      if (pl != lead) mismatch(OpKind::concat, parts[0], p);
      widths.push_back(p.cols());
      total += p.cols();
    }
    std::vector<T> out(rows * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto v = parts[k].values();
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + offset);
      offset += widths[k];
    }
    Shape shape = lead;
    shape.push_back(total);
    std::vector<TensorT> in(parts.begin(), parts.end());
    return record(OpKind::concat, std::move(in), std::move(shape), std::move(out),
                  [rows, total, widths](const Node& node) {
                    const auto& g = node.output.grad();
                    std::size_t offset = 0;
                    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                      if (node.inputs[k].requires_grad()) {
                        auto& gk = node.inputs[k].grad_buffer();
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < widths[k]; ++c)
                            gk[r * widths[k] + c] += g[r * total + offset + c];
                      }
                      offset += widths[k];
                    }
                  });
  }

  TensorT concat(std::initializer_list<TensorT> parts) {
    return concat(std::span<const TensorT>(parts.begin(), parts.size()));
  }

  /// Columns [begin, end) along the last axis.
  TensorT slice(const TensorT& a, std::size_t begin, std::size_t end) {
    const std::size_t cols = a.cols(), rows = a.rows();
    if (begin >= end || end > cols) {
      throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") invalid for shape " + shape_string(a.shape()));
    }
    const std::size_t width = end - begin;
    std::vector<T> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(a.values().data() + r * cols + begin, width, out.data() + r * width);
    Shape shape = a.shape();
    shape.back() = width;
    return record(OpKind::slice, {a}, std::move(shape), std::move(out),
                  [rows, cols, begin, width](const Node& node) {
                    const auto& g = node.output.grad();
                    auto& ga = node.inputs[0].grad_buffer();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < width; ++c) ga[r * cols + begin + c] += g[r * width + c];
                  });
  }

  TensorT transpose(const TensorT& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expects a matrix, got " + shape_string(a.shape()));
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    auto out = kernels::transposed(r, c, a.values().data());
    return record(OpKind::transpose, {a}, {c, r}, std::move(out), [r, c](const Node& node) {
      const auto& g = node.output.grad();
      auto& ga = node.inputs[0].grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
  }

  /// Divides each row by its Euclidean norm. Rows with norm < kMinRowNorm
  /// raise NumericError.
  TensorT l2_normalize_rows(const TensorT& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<T> out(a.numel());
    std::vector<T> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = a.values().data() + r * cols;
      T ss = 0;
      for (std::size_t c = 0; c < cols; ++c) ss += row[c] * row[c];
      const T norm = std::sqrt(ss);
      if (!(norm >= static_cast<T>(kMinRowNorm))) {
        throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has norm " +
                           std::to_string(static_cast<double>(norm)) + " below " +
                           std::to_string(kMinRowNorm));
      }
      norms[r] = norm;
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = row[c] / norm;
    }
    return record(OpKind::l2_normalize_rows, {a}, a.shape(), std::move(out),
                  [rows, cols, norms](const Node& node) {
                    const auto& g = node.output.grad();
                    const auto y = node.output.values();
                    auto& ga = node.inputs[0].grad_buffer();
                    for (std::size_t r = 0; r < rows; ++r) {
                      T dot = 0;
                      for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        ga[i] += (g[i] - y[i] * dot) / norms[r];
                      }
                    }
                  });
  }

  /// Row-wise log(sum(exp(row))) with max subtraction. Output is [rows, 1].
  TensorT log_sum_exp_rows(const TensorT& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = a.values().data() + r * cols;
      const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
      const T mx = row[arg];
      T rest = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        if (c != arg) rest += std::exp(row[c] - mx);
      }
      out[r] = mx + std::log1p(rest);
    }
    return record(OpKind::log_sum_exp_rows, {a}, {rows, 1}, std::move(out), [rows, cols](const Node& node) {
      const auto& g = node.output.grad();
      const auto lse = node.output.values();
      const auto& a = node.inputs[0];
      auto& ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          ga[i] += g[r] * std::exp(a[i] - lse[r]);
        }
    });
  }

  TensorT sigmoid(const TensorT& a) {
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(a[i]);
    return record(OpKind::sigmoid, {a}, a.shape(), std::move(out), [n](const Node& node) {
      const auto& g = node.output.grad();
      const auto y = node.output.values();
      auto& ga = node.inputs[0].grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }

  TensorT sum(const TensorT& a) {
    T acc = 0;
    for (T v : a.values()) acc += v;
    const std::size_t n = a.numel();
    return record(OpKind::sum, {a}, {1}, {acc}, [n](const Node& node) {
      const T g = node.output.grad()[0];
      auto& ga = node.inputs[0].grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
  }

  /// Row sums as a [rows, 1] column.
  TensorT sum_rows(const TensorT& a) {
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<T> out(rows, T(0));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r] += a[r * cols + c];
    return record(OpKind::sum_rows, {a}, {rows, 1}, std::move(out), [rows, cols](const Node& node) {
      const auto& g = node.output.grad();
      auto& ga = node.inputs[0].grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r];
    });
  }

  TensorT mean(const TensorT& a) {
    T acc = 0;
    for (T v : a.values()) acc += v;
    const std::size_t n = a.numel();
    return record(OpKind::mean, {a}, {1}, {acc / static_cast<T>(n)}, [n](const Node& node) {
      const T g = node.output.grad()[0] / static_cast<T>(n);
      auto& ga = node.inputs[0].grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
  }

  /// Gradient reversal: identity forward, backward delivers -lambda * upstream.
  TensorT grl(const TensorT& z, T lambda = T(1)) {
    if (!(lambda >= T(0))) throw ConfigError("lambda_grl", "must be nonnegative");
    for (T v : z.values()) {
      if (!std::isfinite(v)) throw NumericError("grl: non-finite input");
    }
    std::vector<T> out(z.values().begin(), z.values().end());
    const std::size_t n = z.numel();
    return record(OpKind::grl, {z}, z.shape(), std::move(out), [n, lambda](const Node& node) {
      const auto& g = node.output.grad();
      auto& gz = node.inputs[0].grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gz[i] += -lambda * g[i];
    });
  }

  /// Elementwise binary cross-entropy on logits, in the overflow-free form
  /// max(l,0) - l*y + log(1 + exp(-|l|)), multiplied by `mask`. Targets and
  /// mask are treated as constants.
  TensorT bce_with_logits(const TensorT& logits, const TensorT& targets, const TensorT& mask) {
    if (logits.shape() != targets.shape()) mismatch(OpKind::bce_with_logits, logits, targets);
    if (logits.shape() != mask.shape()) mismatch(OpKind::bce_with_logits, logits, mask);
    const std::size_t n = logits.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T l = logits[i];
      out[i] = mask[i] * (std::max(l, T(0)) - l * targets[i] + std::log1p(std::exp(-std::abs(l))));
    }
    return record(OpKind::bce_with_logits, {logits, targets, mask}, logits.shape(), std::move(out),
                  [n](const Node& node) {
                    const auto& g = node.output.grad();
                    const auto& l = node.inputs[0];
                    const auto& y = node.inputs[1];
                    const auto& w = node.inputs[2];
                    if (!l.requires_grad()) return;
                    auto& gl = l.grad_buffer();
                    for (std::size_t i = 0; i < n; ++i) gl[i] += g[i] * w[i] * (stable_sigmoid(l[i]) - y[i]);
                  });
  }

  /// Populates gradients of every requires-grad tensor reachable from `loss`.
  void backward(const TensorT& loss) {
    if (backward_done_) throw Error("backward: already called on this tape; call reset() first");
    if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
    const auto& st = loss.storage();
    if (st.tape_id != id_ || st.tape_generation != generation_) {
      throw Error("backward: loss was not produced on this tape");
    }
    backward_done_ = true;
    loss.grad_buffer()[0] += T(1);
    for (std::size_t i = st.node_index + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!node.output.has_grad()) continue;
      node.backward(node);
    }
  }

  static T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  }

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  [[noreturn]] static void mismatch(OpKind kind, const TensorT& a, const TensorT& b) {
    throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }

  TensorT record(OpKind kind, std::vector<TensorT> inputs, Shape shape, std::vector<T> values,
                 std::function<void(const Node&)> rule) {
    const bool needs_grad = grad_enabled_ &&
        std::any_of(inputs.begin(), inputs.end(), [](const TensorT& t) { return t.requires_grad(); });
    TensorT out(std::move(shape), std::move(values), needs_grad);
    if (!needs_grad) return out;
    auto& st = out.storage();
    st.tape_id = id_;
    st.tape_generation = generation_;
    st.node_index = nodes_.size();
    nodes_.push_back(Node{kind, std::move(inputs), out, std::move(rule)});
    return out;
  }

  std::uint64_t id_;
  std::uint64_t generation_ = 1;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
  bool grad_enabled_ = true;
};

}  // namespace attrface
