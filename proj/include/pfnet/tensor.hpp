#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pfnet/error.hpp"
#include "pfnet/rng.hpp"

namespace pfnet {

// Dense 2-d row-major tensor participating in a define-by-run gradient tape.
// Tensors are handles: copies share the underlying buffer, which is what the
// tape's backward closures rely on. Everything is 64-bit.
class Tensor {
 public:
  struct Storage {
    int rows = 0, cols = 0;
    std::vector<double> v;
    std::vector<double> g;
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->rows = rows;
    t.s_->cols = cols;
    t.s_->v.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    t.s_->g.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(int rows, int cols, std::vector<double> values, bool requires_grad = false) {
    if (static_cast<std::size_t>(rows) * cols != values.size())
      throw ShapeError("tensor init: " + std::to_string(values.size()) + " values for " + std::to_string(rows) +
                       "x" + std::to_string(cols));
    Tensor t = zeros(rows, cols, requires_grad);
    t.s_->v = std::move(values);
    return t;
  }

  static Tensor scalar(double value) { return from(1, 1, {value}); }

  bool defined() const { return s_ != nullptr; }
  int rows() const { return s_->rows; }
  int cols() const { return s_->cols; }
  std::size_t size() const { return s_->v.size(); }
  bool requires_grad() const { return s_->requires_grad; }

  double* data() { return s_->v.data(); }
  const double* data() const { return s_->v.data(); }
  double* grad() { return s_->g.data(); }
  const double* grad() const { return s_->g.data(); }
  std::vector<double>& values() { return s_->v; }
  const std::vector<double>& values() const { return s_->v; }
  std::vector<double>& grads() { return s_->g; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on a non-scalar tensor");
    return s_->v[0];
  }

  void zero_grad() { std::fill(s_->g.begin(), s_->g.end(), 0.0); }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

 private:
  std::shared_ptr<Storage> s_;
};

inline void zero_grad(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

// Plain CSR matrix used for the graph shift operator. It never carries
// gradients; spmm differentiates through the dense operand only.
struct SparseMatrix {
  int rows = 0, cols = 0;
  std::vector<int> row_ptr;  // rows + 1
  std::vector<int> col_idx;
  std::vector<double> vals;
};

// Ordered record of backward closures. Ops push their vector-Jacobian
// products during the forward pass; backward() replays them in reverse.
// Each op also registers its output so repeated backward() calls see fresh
// intermediate gradients; only leaf tensors accumulate across calls.
class Tape {
 public:
  void record(const Tensor& out, std::function<void()> vjp) {
    outputs_.push_back(out);
    nodes_.push_back(std::move(vjp));
  }

  void backward(Tensor loss) {
    if (loss.size() != 1) throw ShapeError("backward requires a scalar loss");
    for (auto& t : outputs_) std::fill(t.grad(), t.grad() + t.size(), 0.0);
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() {
    nodes_.clear();
    outputs_.clear();
  }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<Tensor> outputs_;
};

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

inline std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
}

}  // namespace detail

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: shapes " + detail::shape_str(a) + " and " + detail::shape_str(b) + " do not chain");
  Tensor out = Tensor::zeros(a.rows(), b.cols(), a.requires_grad() || b.requires_grad());
  detail::MapM(out.data(), out.rows(), out.cols()).noalias() =
      detail::MapC(a.data(), a.rows(), a.cols()) * detail::MapC(b.data(), b.rows(), b.cols());
  if (out.requires_grad()) {
    Tensor ca = a, cb = b, co = out;
    tape.record(co, [ca, cb, co]() mutable {
      detail::MapC dc(co.grad(), co.rows(), co.cols());
      if (ca.requires_grad())
        detail::MapM(ca.grad(), ca.rows(), ca.cols()).noalias() +=
            dc * detail::MapC(cb.data(), cb.rows(), cb.cols()).transpose();
      if (cb.requires_grad())
        detail::MapM(cb.grad(), cb.rows(), cb.cols()).noalias() +=
            detail::MapC(ca.data(), ca.rows(), ca.cols()).transpose() * dc;
    });
  }
  return out;
}

// add supports equal shapes and the row-vector bias pattern (1 x C added to
// every row of an m x C tensor).
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  const bool bias = b.rows() == 1 && a.cols() == b.cols() && a.rows() != 1;
  if (!bias) detail::require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      out.data()[static_cast<std::size_t>(i) * a.cols() + j] =
          a.data()[static_cast<std::size_t>(i) * a.cols() + j] +
          b.data()[bias ? j : static_cast<std::size_t>(i) * a.cols() + j];
  if (out.requires_grad()) {
    Tensor ca = a, cb = b, co = out;
    tape.record(co, [ca, cb, co, bias]() mutable {
      const double* dc = co.grad();
      if (ca.requires_grad())
        for (std::size_t k = 0; k < ca.size(); ++k) ca.grad()[k] += dc[k];
      if (cb.requires_grad()) {
        if (bias) {
          for (int i = 0; i < co.rows(); ++i)
            for (int j = 0; j < co.cols(); ++j) cb.grad()[j] += dc[static_cast<std::size_t>(i) * co.cols() + j];
        } else {
          for (std::size_t k = 0; k < cb.size(); ++k) cb.grad()[k] += dc[k];
        }
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] - b.data()[k];
  if (out.requires_grad()) {
    Tensor ca = a, cb = b, co = out;
    tape.record(co, [ca, cb, co]() mutable {
      for (std::size_t k = 0; k < co.size(); ++k) {
        if (ca.requires_grad()) ca.grad()[k] += co.grad()[k];
        if (cb.requires_grad()) cb.grad()[k] -= co.grad()[k];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] * b.data()[k];
  if (out.requires_grad()) {
    Tensor ca = a, cb = b, co = out;
    tape.record(co, [ca, cb, co]() mutable {
      for (std::size_t k = 0; k < co.size(); ++k) {
        if (ca.requires_grad()) ca.grad()[k] += co.grad()[k] * cb.data()[k];
        if (cb.requires_grad()) cb.grad()[k] += co.grad()[k] * ca.data()[k];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] * s;
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co, s]() mutable {
      for (std::size_t k = 0; k < co.size(); ++k) ca.grad()[k] += co.grad()[k] * s;
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] > 0.0 ? a.data()[k] : 0.0;
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co]() mutable {
      for (std::size_t k = 0; k < co.size(); ++k)
        if (ca.data()[k] > 0.0) ca.grad()[k] += co.grad()[k];
    });
  }
  return out;
}

inline Tensor sin(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = std::sin(a.data()[k]);
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co]() mutable {
      for (std::size_t k = 0; k < co.size(); ++k) ca.grad()[k] += co.grad()[k] * std::cos(ca.data()[k]);
    });
  }
  return out;
}

inline Tensor cos(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = std::cos(a.data()[k]);
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co]() mutable {
      for (std::size_t k = 0; k < co.size(); ++k) ca.grad()[k] -= co.grad()[k] * std::sin(ca.data()[k]);
    });
  }
  return out;
}

inline Tensor square(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] * a.data()[k];
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co]() mutable {
      for (std::size_t k = 0; k < co.size(); ++k) ca.grad()[k] += co.grad()[k] * 2.0 * ca.data()[k];
    });
  }
  return out;
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const int rows = parts[0].rows();
  int cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor out = Tensor::zeros(rows, cols, rg);
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < p.cols(); ++j)
        out.data()[static_cast<std::size_t>(i) * cols + off + j] =
            p.data()[static_cast<std::size_t>(i) * p.cols() + j];
    off += p.cols();
  }
  if (rg) {
    std::vector<Tensor> cp = parts;
    Tensor co = out;
    tape.record(co, [cp, co]() mutable {
      int off = 0;
      for (auto& p : cp) {
        if (p.requires_grad())
          for (int i = 0; i < p.rows(); ++i)
            for (int j = 0; j < p.cols(); ++j)
              p.grad()[static_cast<std::size_t>(i) * p.cols() + j] +=
                  co.grad()[static_cast<std::size_t>(i) * co.cols() + off + j];
        off += p.cols();
      }
    });
  }
  return out;
}

inline Tensor slice_cols(Tape& tape, const Tensor& a, int c0, int c1) {
  if (c0 < 0 || c1 > a.cols() || c0 >= c1)
    throw ShapeError("slice_cols [" + std::to_string(c0) + ", " + std::to_string(c1) + ") of " +
                     detail::shape_str(a));
  Tensor out = Tensor::zeros(a.rows(), c1 - c0, a.requires_grad());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = c0; j < c1; ++j)
      out.data()[static_cast<std::size_t>(i) * out.cols() + (j - c0)] =
          a.data()[static_cast<std::size_t>(i) * a.cols() + j];
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co, c0]() mutable {
      for (int i = 0; i < co.rows(); ++i)
        for (int j = 0; j < co.cols(); ++j)
          ca.grad()[static_cast<std::size_t>(i) * ca.cols() + c0 + j] +=
              co.grad()[static_cast<std::size_t>(i) * co.cols() + j];
    });
  }
  return out;
}

// Row gather: out[r] = a[idx[r]].
inline Tensor index_select(Tape& tape, const Tensor& a, const std::vector<int>& idx) {
  Tensor out = Tensor::zeros(static_cast<int>(idx.size()), a.cols(), a.requires_grad());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= a.rows()) throw ShapeError("index_select: row index out of range");
    for (int j = 0; j < a.cols(); ++j)
      out.data()[r * a.cols() + j] = a.data()[static_cast<std::size_t>(idx[r]) * a.cols() + j];
  }
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    auto rows = idx;
    tape.record(co, [ca, co, rows]() mutable {
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (int j = 0; j < ca.cols(); ++j)
          ca.grad()[static_cast<std::size_t>(rows[r]) * ca.cols() + j] += co.grad()[r * co.cols() + j];
    });
  }
  return out;
}

// Row scatter-accumulate: out[idx[r]] += a[r], out has out_rows rows.
inline Tensor scatter_add(Tape& tape, const Tensor& a, const std::vector<int>& idx, int out_rows) {
  if (idx.size() != static_cast<std::size_t>(a.rows()))
    throw ShapeError("scatter_add: one target row index required per input row");
  Tensor out = Tensor::zeros(out_rows, a.cols(), a.requires_grad());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= out_rows) throw ShapeError("scatter_add: row index out of range");
    for (int j = 0; j < a.cols(); ++j)
      out.data()[static_cast<std::size_t>(idx[r]) * a.cols() + j] += a.data()[r * a.cols() + j];
  }
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    auto rows = idx;
    tape.record(co, [ca, co, rows]() mutable {
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (int j = 0; j < ca.cols(); ++j)
          ca.grad()[r * ca.cols() + j] += co.grad()[static_cast<std::size_t>(rows[r]) * co.cols() + j];
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(1, 1, a.requires_grad());
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a.data()[k];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co]() mutable {
      for (std::size_t k = 0; k < ca.size(); ++k) ca.grad()[k] += co.grad()[0];
    });
  }
  return out;
}

inline Tensor mean(Tape& tape, const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(tape, sum(tape, a), 1.0 / static_cast<double>(a.size()));
}

// Sparse-dense product S * X. S carries no gradient; the backward pass
// applies S^T without materializing it.
inline Tensor spmm(Tape& tape, const SparseMatrix& s, const Tensor& x) {
  if (s.cols != x.rows())
    throw ShapeError("spmm: sparse " + std::to_string(s.rows) + "x" + std::to_string(s.cols) + " vs dense " +
                     detail::shape_str(x));
  Tensor out = Tensor::zeros(s.rows, x.cols(), x.requires_grad());
  for (int i = 0; i < s.rows; ++i)
    for (int e = s.row_ptr[i]; e < s.row_ptr[i + 1]; ++e) {
      const int j = s.col_idx[e];
      const double v = s.vals[e];
      for (int k = 0; k < x.cols(); ++k)
        out.data()[static_cast<std::size_t>(i) * x.cols() + k] +=
            v * x.data()[static_cast<std::size_t>(j) * x.cols() + k];
    }
  if (out.requires_grad()) {
    Tensor cx = x, co = out;
    SparseMatrix cs = s;
    tape.record(co, [cs, cx, co]() mutable {
      for (int i = 0; i < cs.rows; ++i)
        for (int e = cs.row_ptr[i]; e < cs.row_ptr[i + 1]; ++e) {
          const int j = cs.col_idx[e];
          const double v = cs.vals[e];
          for (int k = 0; k < cx.cols(); ++k)
            cx.grad()[static_cast<std::size_t>(j) * cx.cols() + k] +=
                v * co.grad()[static_cast<std::size_t>(i) * cx.cols() + k];
        }
    });
  }
  return out;
}

// Inverted-scaling dropout: kept activations are scaled by 1/(1-p) so the
// expected magnitude is unchanged; identity when train is false or p == 0.
inline Tensor dropout(Tape& tape, const Tensor& a, double p, bool train, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ValidationError("dropout probability must be in [0, 1)");
  if (!train || p == 0.0) return a;
  Tensor out = Tensor::zeros(a.rows(), a.cols(), a.requires_grad());
  std::vector<double> keep(a.size());
  const double inv = 1.0 / (1.0 - p);
  for (std::size_t k = 0; k < a.size(); ++k) {
    keep[k] = rng.next_double() >= p ? inv : 0.0;
    out.data()[k] = a.data()[k] * keep[k];
  }
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co, keep = std::move(keep)]() mutable {
      for (std::size_t k = 0; k < co.size(); ++k) ca.grad()[k] += co.grad()[k] * keep[k];
    });
  }
  return out;
}

// Row-major reinterpretation to a new shape with the same element count.
inline Tensor reshape(Tape& tape, const Tensor& a, int rows, int cols) {
  if (static_cast<std::size_t>(rows) * cols != a.size())
    throw ShapeError("reshape: " + detail::shape_str(a) + " to " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  Tensor out = Tensor::zeros(rows, cols, a.requires_grad());
  out.values() = a.values();
  if (out.requires_grad()) {
    Tensor ca = a, co = out;
    tape.record(co, [ca, co]() mutable {
      for (std::size_t k = 0; k < ca.size(); ++k) ca.grad()[k] += co.grad()[k];
    });
  }
  return out;
}

}  // namespace pfnet
