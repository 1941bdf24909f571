#pragma once

// Reverse-mode differentiation over row-major dense tensors.
//
// A Graph records one forward pass. Each node owns its value and, once
// backward() runs, its gradient. Parameter leaves copy their values in and
// route their gradients to an external accumulator, so one Graph per sample
// can be discarded after the backward sweep.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mivqa/error.hpp"

namespace mivqa::ag {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Graph;

template <typename T>
using BackwardFn = std::function<void(Graph<T>&, int)>;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  BackwardFn<T> backward;
  T* sink = nullptr;
  bool requires_grad = false;
};

template <typename T>
class Graph {
 public:
  /// With `record == false` no backward closures are kept (inference).
  explicit Graph(bool record = true) : record_(record) { nodes_.reserve(256); }

  bool recording() const { return record_; }

  Var constant(Shape shape, std::vector<T> value) {
    assert(numel(shape) == value.size());
    Node<T> n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf whose gradient is added into `grad_sink` (may be null) on backward().
  Var leaf(Shape shape, std::span<const T> value, T* grad_sink) {
    assert(numel(shape) == value.size());
    Node<T> n;
    n.shape = std::move(shape);
    n.value.assign(value.begin(), value.end());
    n.sink = grad_sink;
    n.requires_grad = record_ && grad_sink != nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Appends an op result. `inputs` decide whether the node needs a gradient.
  Var emit(Shape shape, std::vector<T> value, std::initializer_list<Var> inputs, BackwardFn<T> fn) {
    bool req = false;
    if (record_) {
      for (Var v : inputs) req = req || nodes_[v.id].requires_grad;
    }
    return push(std::move(shape), std::move(value), req, std::move(fn));
  }

  Var emit(Shape shape, std::vector<T> value, std::span<const Var> inputs, BackwardFn<T> fn) {
    bool req = false;
    if (record_) {
      for (Var v : inputs) req = req || nodes_[v.id].requires_grad;
    }
    return push(std::move(shape), std::move(value), req, std::move(fn));
  }

  const Shape& shape(Var v) const { return nodes_[v.id].shape; }
  std::span<const T> value(Var v) const { return nodes_[v.id].value; }
  std::vector<T> take(Var v) const { return nodes_[v.id].value; }
  T scalar(Var v) const { return nodes_[v.id].value.at(0); }
  std::size_t size(Var v) const { return nodes_[v.id].value.size(); }
  std::size_t node_count() const { return nodes_.size(); }

  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of node `id`, allocated on first use.
  std::vector<T>& grad(int id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }
  std::span<const T> value(int id) const { return nodes_[id].value; }
  const Shape& shape(int id) const { return nodes_[id].shape; }

  /// Propagates d(root)/d(node) through every recorded node, then flushes
  /// leaf gradients to their sinks.
  void backward(Var root, T seed = T(1)) {
    require(record_, Errc::ConfigInvalid, "backward() on a non-recording graph");
    if (!nodes_[root.id].requires_grad) return;
    auto& g = grad(root.id);
    std::fill(g.begin(), g.end(), seed);
    for (int id = root.id; id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.sink) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.sink[i] += n.grad[i];
      }
    }
  }

 private:
  Var push(Shape shape, std::vector<T> value, bool req, BackwardFn<T> fn) {
    assert(numel(shape) == value.size());
    Node<T> n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = req;
    if (req) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node<T>> nodes_;
  bool record_;
};

// ---------------------------------------------------------------------------
// dense kernels

namespace kernel {

/// C[m,n] (+)= op(A)[m,k] * op(B)[k,n], all row-major.
template <typename T>
void gemm(bool ta, bool tb, int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, T(0));
  if (!ta && !tb) {
    for (int i = 0; i < m; ++i) {
      T* ci = c + static_cast<std::size_t>(i) * n;
      const T* ai = a + static_cast<std::size_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const T av = ai[p];
        if (av == T(0)) continue;
        const T* bp = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!ta && tb) {
    for (int i = 0; i < m; ++i) {
      const T* ai = a + static_cast<std::size_t>(i) * k;
      T* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const T* bj = b + static_cast<std::size_t>(j) * k;
        T s = T(0);
        for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
        ci[j] += s;
      }
    }
  } else if (ta && !tb) {
    for (int p = 0; p < k; ++p) {
      const T* ap = a + static_cast<std::size_t>(p) * m;
      const T* bp = b + static_cast<std::size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const T av = ap[i];
        if (av == T(0)) continue;
        T* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        T s = T(0);
        for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(p) * m + i] * b[static_cast<std::size_t>(j) * k + p];
        c[static_cast<std::size_t>(i) * n + j] += s;
      }
    }
  }
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// ops

namespace detail {

/// (rows, cols) view of a tensor: last axis is cols, all others fold into rows.
inline std::pair<int, int> as_matrix(const Shape& s) {
  if (s.empty()) return {1, 1};
  const int cols = s.back();
  const int rows = cols == 0 ? 0 : static_cast<int>(numel(s) / static_cast<std::size_t>(cols));
  return {rows, cols};
}

inline void check(bool cond, const std::string& what) { require(cond, Errc::ShapeMismatch, what); }

}  // namespace detail

/// op(a) * op(b) for 2-D operands.
template <typename T>
Var matmul(Graph<T>& g, Var a, Var b, bool ta = false, bool tb = false) {
  const Shape& sa = g.shape(a);
  const Shape& sb = g.shape(b);
  detail::check(sa.size() == 2 && sb.size() == 2, "matmul expects 2-D operands, got " + shape_str(sa) + " and " + shape_str(sb));
  const int m = ta ? sa[1] : sa[0];
  const int k = ta ? sa[0] : sa[1];
  const int kb = tb ? sb[1] : sb[0];
  const int n = tb ? sb[0] : sb[1];
  detail::check(k == kb, "matmul inner dimensions differ: " + shape_str(sa) + " x " + shape_str(sb));
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  kernel::gemm(ta, tb, m, n, k, g.value(a).data(), g.value(b).data(), out.data(), false);
  return g.emit({m, n}, std::move(out), {a, b}, [a, b, ta, tb, m, n, k](Graph<T>& gr, int self) {
    const T* dc = gr.grad(self).data();
    if (gr.needs_grad(a)) {
      T* da = gr.grad(a.id).data();
      if (!ta) {
        kernel::gemm(false, !tb, m, k, n, dc, gr.value(b).data(), da, true);
      } else {
        kernel::gemm(tb, true, k, m, n, gr.value(b).data(), dc, da, true);
      }
    }
    if (gr.needs_grad(b)) {
      T* db = gr.grad(b.id).data();
      if (!tb) {
        kernel::gemm(!ta, false, k, n, m, gr.value(a).data(), dc, db, true);
      } else {
        kernel::gemm(true, ta, n, k, m, dc, gr.value(a).data(), db, true);
      }
    }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  detail::check(g.size(a) == g.size(b), "add: " + shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
  std::vector<T> out(g.value(a).begin(), g.value(a).end());
  auto bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.emit(g.shape(a), std::move(out), {a, b}, [a, b](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    for (Var v : {a, b}) {
      if (!gr.needs_grad(v)) continue;
      auto& d = gr.grad(v.id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
    }
  });
}

/// a[rows, n] + row[n], broadcast over rows.
template <typename T>
Var add_row(Graph<T>& g, Var a, Var row) {
  const auto [rows, cols] = detail::as_matrix(g.shape(a));
  detail::check(g.size(row) == static_cast<std::size_t>(cols), "add_row: row of " + shape_str(g.shape(row)) + " vs " + shape_str(g.shape(a)));
  std::vector<T> out(g.value(a).begin(), g.value(a).end());
  auto rv = g.value(row);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] += rv[c];
  return g.emit(g.shape(a), std::move(out), {a, row}, [a, row, rows, cols](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    if (gr.needs_grad(a)) {
      auto& d = gr.grad(a.id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
    }
    if (gr.needs_grad(row)) {
      auto& d = gr.grad(row.id);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) d[c] += dc[static_cast<std::size_t>(r) * cols + c];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  detail::check(g.size(a) == g.size(b), "mul: " + shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
  std::vector<T> out(g.size(a));
  auto av = g.value(a);
  auto bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.emit(g.shape(a), std::move(out), {a, b}, [a, b](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    if (gr.needs_grad(a)) {
      auto& d = gr.grad(a.id);
      auto bv = gr.value(b.id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * bv[i];
    }
    if (gr.needs_grad(b)) {
      auto& d = gr.grad(b.id);
      auto av = gr.value(a.id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * av[i];
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T factor) {
  std::vector<T> out(g.value(a).begin(), g.value(a).end());
  for (auto& x : out) x *= factor;
  return g.emit(g.shape(a), std::move(out), {a}, [a, factor](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    auto& d = gr.grad(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * dc[i];
  });
}

namespace detail {

template <typename T, typename F, typename DF>
Var unary(Graph<T>& g, Var a, F f, DF df_from_output) {
  std::vector<T> out(g.size(a));
  auto av = g.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return g.emit(g.shape(a), std::move(out), {a}, [a, df_from_output](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    auto y = gr.value(self);
    auto x = gr.value(a.id);
    auto& d = gr.grad(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i] * df_from_output(x[i], y[i]);
  });
}

}  // namespace detail

template <typename T>
Var relu(Graph<T>& g, Var a) {
  return detail::unary(
      g, a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var tanh(Graph<T>& g, Var a) {
  return detail::unary(
      g, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var a) {
  return detail::unary(
      g, a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

/// Same values, new shape.
template <typename T>
Var reshape(Graph<T>& g, Var a, Shape shape) {
  detail::check(numel(shape) == g.size(a), "reshape " + shape_str(g.shape(a)) + " -> " + shape_str(shape));
  std::vector<T> out(g.value(a).begin(), g.value(a).end());
  return g.emit(std::move(shape), std::move(out), {a}, [a](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    auto& d = gr.grad(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dc[i];
  });
}

/// out[i] = a[index[i]], or 0 where index[i] < 0.
template <typename T>
Var gather(Graph<T>& g, Var a, std::vector<int> index, Shape shape) {
  detail::check(numel(shape) == index.size(), "gather: index length vs " + shape_str(shape));
  auto av = g.value(a);
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    assert(index[i] < static_cast<int>(av.size()));
    out[i] = index[i] >= 0 ? av[static_cast<std::size_t>(index[i])] : T(0);
  }
  return g.emit(std::move(shape), std::move(out), {a}, [a, index = std::move(index)](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    auto& d = gr.grad(a.id);
    for (std::size_t i = 0; i < index.size(); ++i)
      if (index[i] >= 0) d[static_cast<std::size_t>(index[i])] += dc[i];
  });
}

/// Sparse row mixing: output row r = sum over (src, w) in rows[r] of w * a[src, :].
template <typename T>
struct RowMix {
  std::vector<std::vector<std::pair<int, T>>> rows;
};

template <typename T>
Var mix_rows(Graph<T>& g, Var a, RowMix<T> mix) {
  const auto [in_rows, cols] = detail::as_matrix(g.shape(a));
  const int out_rows = static_cast<int>(mix.rows.size());
  auto av = g.value(a);
  std::vector<T> out(static_cast<std::size_t>(out_rows) * cols, T(0));
  for (int r = 0; r < out_rows; ++r) {
    T* o = out.data() + static_cast<std::size_t>(r) * cols;
    for (auto [src, w] : mix.rows[r]) {
      detail::check(src >= 0 && src < in_rows, "mix_rows: source row out of range");
      const T* s = av.data() + static_cast<std::size_t>(src) * cols;
      for (int c = 0; c < cols; ++c) o[c] += w * s[c];
    }
  }
  return g.emit({out_rows, cols}, std::move(out), {a}, [a, cols, mix = std::move(mix)](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    auto& d = gr.grad(a.id);
    for (std::size_t r = 0; r < mix.rows.size(); ++r) {
      const T* o = dc.data() + r * cols;
      for (auto [src, w] : mix.rows[r]) {
        T* s = d.data() + static_cast<std::size_t>(src) * cols;
        for (int c = 0; c < cols; ++c) s[c] += w * o[c];
      }
    }
  });
}

/// Stacks operands along the leading axis; all must share the trailing size.
template <typename T>
Var concat_rows(Graph<T>& g, std::span<const Var> parts) {
  detail::check(!parts.empty(), "concat_rows: nothing to concatenate");
  const int cols = detail::as_matrix(g.shape(parts[0])).second;
  int rows = 0;
  std::vector<T> out;
  for (Var p : parts) {
    const auto [r, c] = detail::as_matrix(g.shape(p));
    detail::check(c == cols, "concat_rows: column mismatch " + shape_str(g.shape(p)));
    rows += r;
    auto v = g.value(p);
    out.insert(out.end(), v.begin(), v.end());
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return g.emit({rows, cols}, std::move(out), parts, [keep](Graph<T>& gr, int self) {
    const auto& dc = gr.grad(self);
    std::size_t off = 0;
    for (Var p : keep) {
      const std::size_t n = gr.value(p.id).size();
      if (gr.needs_grad(p)) {
        auto& d = gr.grad(p.id);
        for (std::size_t i = 0; i < n; ++i) d[i] += dc[off + i];
      }
      off += n;
    }
  });
}

/// Row-wise softmax over the last axis. Columns with mask[c] == 0 get
/// probability exactly zero; an empty mask keeps every column.
template <typename T>
Var softmax_rows(Graph<T>& g, Var a, std::vector<char> mask = {}) {
  const auto [rows, cols] = detail::as_matrix(g.shape(a));
  detail::check(mask.empty() || mask.size() == static_cast<std::size_t>(cols), "softmax_rows: mask length");
  auto av = g.value(a);
  std::vector<T> out(av.size(), T(0));
  for (int r = 0; r < rows; ++r) {
    const T* x = av.data() + static_cast<std::size_t>(r) * cols;
    T* y = out.data() + static_cast<std::size_t>(r) * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c)
      if (mask.empty() || mask[c]) mx = std::max(mx, x[c]);
    T z = T(0);
    for (int c = 0; c < cols; ++c) {
      if (mask.empty() || mask[c]) {
        y[c] = std::exp(x[c] - mx);
        z += y[c];
      }
    }
    for (int c = 0; c < cols; ++c) y[c] /= z;
  }
  return g.emit(g.shape(a), std::move(out), {a}, [a, rows, cols](Graph<T>& gr, int self) {
    const auto& dy = gr.grad(self);
    auto y = gr.value(self);
    auto& dx = gr.grad(a.id);
    for (int r = 0; r < rows; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * cols;
      T dot = T(0);
      for (int c = 0; c < cols; ++c) dot += dy[o + c] * y[o + c];
      for (int c = 0; c < cols; ++c) dx[o + c] += y[o + c] * (dy[o + c] - dot);
    }
  });
}

/// Row-wise layer normalisation with learned gain and bias.
template <typename T>
Var layer_norm_rows(Graph<T>& g, Var a, Var gain, Var bias, T eps = T(1e-5)) {
  const auto [rows, cols] = detail::as_matrix(g.shape(a));
  detail::check(g.size(gain) == static_cast<std::size_t>(cols) && g.size(bias) == static_cast<std::size_t>(cols),
                "layer_norm_rows: gain/bias length");
  auto x = g.value(a);
  auto gv = g.value(gain);
  auto bv = g.value(bias);
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * cols;
    T mean = T(0);
    for (int c = 0; c < cols; ++c) mean += x[o + c];
    mean /= T(cols);
    T var = T(0);
    for (int c = 0; c < cols; ++c) var += (x[o + c] - mean) * (x[o + c] - mean);
    var /= T(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c) {
      xhat[o + c] = (x[o + c] - mean) * rstd[r];
      out[o + c] = xhat[o + c] * gv[c] + bv[c];
    }
  }
  return g.emit(g.shape(a), std::move(out), {a, gain, bias},
                [a, gain, bias, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& gr, int self) {
                  const auto& dy = gr.grad(self);
                  auto gv = gr.value(gain.id);
                  if (gr.needs_grad(gain) || gr.needs_grad(bias)) {
                    auto& dg = gr.grad(gain.id);
                    auto& db = gr.grad(bias.id);
                    for (int r = 0; r < rows; ++r)
                      for (int c = 0; c < cols; ++c) {
                        const std::size_t i = static_cast<std::size_t>(r) * cols + c;
                        dg[c] += dy[i] * xhat[i];
                        db[c] += dy[i];
                      }
                  }
                  if (!gr.needs_grad(a)) return;
                  auto& dx = gr.grad(a.id);
                  for (int r = 0; r < rows; ++r) {
                    const std::size_t o = static_cast<std::size_t>(r) * cols;
                    T m1 = T(0);
                    T m2 = T(0);
                    for (int c = 0; c < cols; ++c) {
                      const T dxh = dy[o + c] * gv[c];
                      m1 += dxh;
                      m2 += dxh * xhat[o + c];
                    }
                    m1 /= T(cols);
                    m2 /= T(cols);
                    for (int c = 0; c < cols; ++c) {
                      const T dxh = dy[o + c] * gv[c];
                      dx[o + c] += rstd[r] * (dxh - m1 - xhat[o + c] * m2);
                    }
                  }
                });
}

/// Scaled dot-product attention split over `heads`. Query rows attend over
/// key rows; keys with mask[j] == 0 receive zero weight.
template <typename T>
Var multi_head_attention(Graph<T>& g, Var q, Var k, Var v, std::vector<char> key_mask, int heads) {
  const Shape& sq = g.shape(q);
  const Shape& sk = g.shape(k);
  detail::check(sq.size() == 2 && sk.size() == 2 && g.shape(v) == sk, "attention: expects q[n,D], k[m,D], v[m,D]");
  const int n = sq[0];
  const int dim = sq[1];
  const int m = sk[0];
  detail::check(sk[1] == dim, "attention: key width differs from query width");
  detail::check(heads > 0 && dim % heads == 0, "attention: width not divisible by heads");
  detail::check(key_mask.size() == static_cast<std::size_t>(m), "attention: mask length");
  detail::check(std::any_of(key_mask.begin(), key_mask.end(), [](char c) { return c != 0; }), "attention: every key is masked");
  const int dh = dim / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  auto qv = g.value(q);
  auto kv = g.value(k);
  auto vv = g.value(v);
  std::vector<T> probs(static_cast<std::size_t>(heads) * n * m, T(0));
  std::vector<T> out(static_cast<std::size_t>(n) * dim, T(0));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < n; ++i) {
      T* pr = probs.data() + (static_cast<std::size_t>(h) * n + i) * m;
      const T* qi = qv.data() + static_cast<std::size_t>(i) * dim + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < m; ++j) {
        if (!key_mask[j]) continue;
        const T* kj = kv.data() + static_cast<std::size_t>(j) * dim + off;
        T s = T(0);
        for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
        pr[j] = s * sc;
        mx = std::max(mx, pr[j]);
      }
      T z = T(0);
      for (int j = 0; j < m; ++j) {
        if (!key_mask[j]) continue;
        pr[j] = std::exp(pr[j] - mx);
        z += pr[j];
      }
      T* oi = out.data() + static_cast<std::size_t>(i) * dim + off;
      for (int j = 0; j < m; ++j) {
        if (!key_mask[j]) continue;
        pr[j] /= z;
        const T* vj = vv.data() + static_cast<std::size_t>(j) * dim + off;
        for (int c = 0; c < dh; ++c) oi[c] += pr[j] * vj[c];
      }
    }
  }
  return g.emit({n, dim}, std::move(out), {q, k, v},
                [q, k, v, n, m, dim, dh, heads, sc, probs = std::move(probs)](Graph<T>& gr, int self) {
                  const auto& dout = gr.grad(self);
                  auto qv = gr.value(q.id);
                  auto kv = gr.value(k.id);
                  auto vv = gr.value(v.id);
                  T* dq = gr.needs_grad(q) ? gr.grad(q.id).data() : nullptr;
                  T* dk = gr.needs_grad(k) ? gr.grad(k.id).data() : nullptr;
                  T* dv = gr.needs_grad(v) ? gr.grad(v.id).data() : nullptr;
                  std::vector<T> dp(static_cast<std::size_t>(m));
                  for (int h = 0; h < heads; ++h) {
                    const int off = h * dh;
                    for (int i = 0; i < n; ++i) {
                      const T* pr = probs.data() + (static_cast<std::size_t>(h) * n + i) * m;
                      const T* doi = dout.data() + static_cast<std::size_t>(i) * dim + off;
                      T dot = T(0);
                      for (int j = 0; j < m; ++j) {
                        const T* vj = vv.data() + static_cast<std::size_t>(j) * dim + off;
                        T s = T(0);
                        for (int c = 0; c < dh; ++c) s += doi[c] * vj[c];
                        dp[j] = s;
                        dot += s * pr[j];
                        if (dv && pr[j] != T(0)) {
                          T* dvj = dv + static_cast<std::size_t>(j) * dim + off;
                          for (int c = 0; c < dh; ++c) dvj[c] += pr[j] * doi[c];
                        }
                      }
                      const T* qi = qv.data() + static_cast<std::size_t>(i) * dim + off;
                      for (int j = 0; j < m; ++j) {
                        if (pr[j] == T(0)) continue;
                        const T ds = pr[j] * (dp[j] - dot) * sc;
                        const T* kj = kv.data() + static_cast<std::size_t>(j) * dim + off;
                        if (dq) {
                          T* dqi = dq + static_cast<std::size_t>(i) * dim + off;
                          for (int c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                        }
                        if (dk) {
                          T* dkj = dk + static_cast<std::size_t>(j) * dim + off;
                          for (int c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                        }
                      }
                    }
                  }
                });
}

/// -log(max(p[target], eps)) for a probability vector p.
template <typename T>
Var nll_of_probs(Graph<T>& g, Var p, int target, T eps) {
  auto pv = g.value(p);
  require(target >= 0 && static_cast<std::size_t>(target) < pv.size(), Errc::TargetOutOfRange,
          "target " + std::to_string(target) + " outside [0," + std::to_string(pv.size()) + ")");
  const T pt = pv[static_cast<std::size_t>(target)];
  const T loss = -std::log(std::max(pt, eps));
  return g.emit({1}, {loss}, {p}, [p, target, eps](Graph<T>& gr, int self) {
    const T dl = gr.grad(self)[0];
    const T pt = gr.value(p.id)[static_cast<std::size_t>(target)];
    if (pt > eps) gr.grad(p.id)[static_cast<std::size_t>(target)] += -dl / pt;
  });
}

/// Weighted sum of scalar nodes.
template <typename T>
Var weighted_sum(Graph<T>& g, std::span<const Var> terms, std::span<const T> weights) {
  detail::check(terms.size() == weights.size(), "weighted_sum: terms vs weights");
  T total = T(0);
  for (std::size_t i = 0; i < terms.size(); ++i) total += weights[i] * g.scalar(terms[i]);
  std::vector<Var> keep(terms.begin(), terms.end());
  std::vector<T> w(weights.begin(), weights.end());
  return g.emit({1}, {total}, terms, [keep, w](Graph<T>& gr, int self) {
    const T dl = gr.grad(self)[0];
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (gr.needs_grad(keep[i])) gr.grad(keep[i].id)[0] += w[i] * dl;
  });
}

}  // namespace mivqa::ag
