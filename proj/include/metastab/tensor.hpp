#pragma once

// Minimal reverse-mode tensor engine. Tensors are shared handles onto a
// value/grad node; primitives record backward closures on the thread-local
// active Tape. Replaying the tape in reverse visits every node after all of
// its consumers, so one pass computes exact gradients.
//
// Scalar type is a template parameter: the pipeline runs float, gradient
// checks instantiate double. No broadcasting beyond per-channel bias.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace metastab {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void op_shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<S>>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), S(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.value().begin(), t.value().end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("Tensor::from: data length " +
                                  std::to_string(data.size()) + " != numel of " +
                                  shape_str(shape));
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<S>& value() { return node_->value; }
  const std::vector<S>& value() const { return node_->value; }

  /// Gradient buffer; allocated zeroed on first access.
  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return node_->value[0];
  }

  /// Deep copy of values only (no grad, detached from any tape).
  Tensor clone_detached(bool requires_grad = false) const {
    Tensor t = from(node_->shape, node_->value, requires_grad);
    return t;
  }

  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

/// Suppresses tape recording while alive (guide/target computation).
class GradPause {
 public:
  GradPause() { ++depth(); }
  ~GradPause() { --depth(); }
  GradPause(const GradPause&) = delete;
  static bool active() { return depth() > 0; }

 private:
  static int& depth() {
    thread_local int d = 0;
    return d;
  }
};

template <class S>
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return GradPause::active() ? nullptr : active_; }

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  size_t size() const { return entries_.size(); }

  /// Seeds d(root)/d(root)=1 and replays recorded ops newest-first.
  /// The tape is cleared afterwards (graph freed, tape reusable).
  void backward(Tensor<S> root) {
    if (root.numel() != 1)
      throw std::invalid_argument("backward: root must be scalar, got " +
                                  shape_str(root.shape()));
    root.grad()[0] = S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

  void clear() { entries_.clear(); }

 private:
  std::vector<std::function<void()>> entries_;
  Tape* prev_;
  inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

template <class S>
bool tracked(const Tensor<S>& t) {
  return Tape<S>::active() != nullptr && t.requires_grad();
}

template <class S, class F>
Tensor<S> unary_op(const char* /*name*/, const Tensor<S>& x, F&& fwd,
                   std::function<S(S /*x*/, S /*y*/)> dfd) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  const auto& xv = x.value();
  auto& yv = y.value();
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = fwd(xv[i]);
  if (tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node();
    auto yn = y.node();
    Tape<S>::active()->record([xn, yn, dfd]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->value.size(); ++i)
        xn->grad[i] += yn->grad[i] * dfd(xn->value[i], yn->value[i]);
    });
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) op_shape_error("add", a.shape(), b.shape());
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = y.value();
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + bv[i];
  if (detail::tracked(a) || detail::tracked(b)) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active()->record([an, bn, yn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += yn->grad[i];
      }
    });
  }
  return y;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) op_shape_error("sub", a.shape(), b.shape());
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = y.value();
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] - bv[i];
  if (detail::tracked(a) || detail::tracked(b)) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active()->record([an, bn, yn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= yn->grad[i];
      }
    });
  }
  return y;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) op_shape_error("mul", a.shape(), b.shape());
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = y.value();
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] * bv[i];
  if (detail::tracked(a) || detail::tracked(b)) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active()->record([an, bn, yn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i)
          an->grad[i] += yn->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i)
          bn->grad[i] += yn->grad[i] * an->value[i];
      }
    });
  }
  return y;
}

template <class S>
Tensor<S> divt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) op_shape_error("div", a.shape(), b.shape());
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& yv = y.value();
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] / bv[i];
  if (detail::tracked(a) || detail::tracked(b)) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<S>::active()->record([an, bn, yn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i)
          an->grad[i] += yn->grad[i] / bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i)
          bn->grad[i] -= yn->grad[i] * yn->value[i] / bn->value[i];
      }
    });
  }
  return y;
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S k) {
  return detail::unary_op<S>("scale", x, [k](S v) { return k * v; },
                             [k](S, S) { return k; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S k) {
  return detail::unary_op<S>("add_scalar", x, [k](S v) { return v + k; },
                             [](S, S) { return S(1); });
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op<S>("relu", x, [](S v) { return v > S(0) ? v : S(0); },
                             [](S xv, S) { return xv > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope = S(0.1)) {
  return detail::unary_op<S>(
      "leaky_relu", x, [slope](S v) { return v > S(0) ? v : slope * v; },
      [slope](S xv, S) { return xv > S(0) ? S(1) : slope; });
}

template <class S>
Tensor<S> abs_t(const Tensor<S>& x) {
  return detail::unary_op<S>(
      "abs", x, [](S v) { return std::abs(v); },
      [](S xv, S) { return xv > S(0) ? S(1) : (xv < S(0) ? S(-1) : S(0)); });
}

template <class S>
Tensor<S> square(const Tensor<S>& x) {
  return detail::unary_op<S>("square", x, [](S v) { return v * v; },
                             [](S xv, S) { return S(2) * xv; });
}

template <class S>
Tensor<S> sqrt_t(const Tensor<S>& x) {
  return detail::unary_op<S>("sqrt", x, [](S v) { return std::sqrt(v); },
                             [](S, S yv) { return S(0.5) / yv; });
}

template <class S>
Tensor<S> exp_t(const Tensor<S>& x) {
  return detail::unary_op<S>("exp", x, [](S v) { return std::exp(v); },
                             [](S, S yv) { return yv; });
}

template <class S>
Tensor<S> log_t(const Tensor<S>& x) {
  return detail::unary_op<S>("log", x, [](S v) { return std::log(v); },
                             [](S xv, S) { return S(1) / xv; });
}

template <class S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  return detail::unary_op<S>(
      "clamp", x, [lo, hi](S v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](S xv, S) { return (xv > lo && xv < hi) ? S(1) : S(0); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc = S(0);
  for (S v : x.value()) acc += v;
  Tensor<S> y = Tensor<S>::scalar(acc);
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const S g = yn->grad[0];
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return y;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  const S inv = S(1) / static_cast<S>(x.numel());
  S acc = S(0);
  for (S v : x.value()) acc += v;
  Tensor<S> y = Tensor<S>::scalar(acc * inv);
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, inv]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const S g = yn->grad[0] * inv;
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// 2-D matrix ops (feature matrices: rows = positions, cols = channels)
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
void require_rank(const char* op, const Tensor<S>& t, int rank) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got " + shape_str(t.shape()));
}
}  // namespace detail

/// matmul with optional transposes: y = op(a) * op(b).
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool ta = false,
                 bool tb = false) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const int n = ta ? a.dim(1) : a.dim(0);
  const int k = ta ? a.dim(0) : a.dim(1);
  const int kb = tb ? b.dim(1) : b.dim(0);
  const int m = tb ? b.dim(0) : b.dim(1);
  if (k != kb) op_shape_error("matmul", a.shape(), b.shape());

  auto at = [&](const std::vector<S>& v, int i, int j) {
    return ta ? v[static_cast<size_t>(j) * a.dim(1) + i]
              : v[static_cast<size_t>(i) * a.dim(1) + j];
  };
  auto bt = [&](const std::vector<S>& v, int i, int j) {
    return tb ? v[static_cast<size_t>(j) * b.dim(1) + i]
              : v[static_cast<size_t>(i) * b.dim(1) + j];
  };

  Tensor<S> y = Tensor<S>::zeros({n, m});
  auto& yv = y.value();
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int i = 0; i < n; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const S aik = at(av, i, kk);
      if (aik == S(0)) continue;
      S* yrow = &yv[static_cast<size_t>(i) * m];
      for (int j = 0; j < m; ++j) yrow[j] += aik * bt(bv, kk, j);
    }

  if (detail::tracked(a) || detail::tracked(b)) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    const int ad1 = a.dim(1), bd1 = b.dim(1);
    Tape<S>::active()->record([an, bn, yn, ta, tb, n, m, k, ad1, bd1]() {
      const auto& g = yn->grad;
      auto a_idx = [&](int i, int kk) {
        return ta ? static_cast<size_t>(kk) * ad1 + i : static_cast<size_t>(i) * ad1 + kk;
      };
      auto b_idx = [&](int kk, int j) {
        return tb ? static_cast<size_t>(j) * bd1 + kk : static_cast<size_t>(kk) * bd1 + j;
      };
      if (an->requires_grad) {
        an->ensure_grad();
        for (int i = 0; i < n; ++i)
          for (int kk = 0; kk < k; ++kk) {
            S acc = S(0);
            const S* grow = &g[static_cast<size_t>(i) * m];
            for (int j = 0; j < m; ++j) acc += grow[j] * bn->value[b_idx(kk, j)];
            an->grad[a_idx(i, kk)] += acc;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int kk = 0; kk < k; ++kk)
          for (int j = 0; j < m; ++j) {
            S acc = S(0);
            for (int i = 0; i < n; ++i)
              acc += g[static_cast<size_t>(i) * m + j] * an->value[a_idx(i, kk)];
            bn->grad[b_idx(kk, j)] += acc;
          }
      }
    });
  }
  return y;
}

/// Row-wise sum of an [N,M] matrix -> [N].
template <class S>
Tensor<S> row_sum(const Tensor<S>& x) {
  detail::require_rank("row_sum", x, 2);
  const int n = x.dim(0), m = x.dim(1);
  Tensor<S> y = Tensor<S>::zeros({n});
  for (int i = 0; i < n; ++i) {
    S acc = S(0);
    const S* row = &x.value()[static_cast<size_t>(i) * m];
    for (int j = 0; j < m; ++j) acc += row[j];
    y.value()[static_cast<size_t>(i)] = acc;
  }
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, n, m]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const S g = yn->grad[static_cast<size_t>(i)];
        S* grow = &xn->grad[static_cast<size_t>(i) * m];
        for (int j = 0; j < m; ++j) grow[j] += g;
      }
    });
  }
  return y;
}

namespace detail {
template <class S, bool kMax>
Tensor<S> row_extreme(const Tensor<S>& x) {
  require_rank(kMax ? "row_max" : "row_min", x, 2);
  const int n = x.dim(0), m = x.dim(1);
  Tensor<S> y = Tensor<S>::zeros({n});
  auto arg = std::make_shared<std::vector<int>>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const S* row = &x.value()[static_cast<size_t>(i) * m];
    int best = 0;
    for (int j = 1; j < m; ++j) {
      if (kMax ? row[j] > row[best] : row[j] < row[best]) best = j;
    }
    (*arg)[static_cast<size_t>(i)] = best;
    y.value()[static_cast<size_t>(i)] = row[best];
  }
  if (tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, arg, n, m]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int i = 0; i < n; ++i)
        xn->grad[static_cast<size_t>(i) * m + (*arg)[static_cast<size_t>(i)]] +=
            yn->grad[static_cast<size_t>(i)];
    });
  }
  return y;
}
}  // namespace detail

template <class S>
Tensor<S> row_min(const Tensor<S>& x) {
  return detail::row_extreme<S, false>(x);
}

template <class S>
Tensor<S> row_max(const Tensor<S>& x) {
  return detail::row_extreme<S, true>(x);
}

/// Column-wise max of an [N,M] matrix -> [M].
template <class S>
Tensor<S> col_max(const Tensor<S>& x) {
  detail::require_rank("col_max", x, 2);
  const int n = x.dim(0), m = x.dim(1);
  Tensor<S> y = Tensor<S>::zeros({m});
  auto arg = std::make_shared<std::vector<int>>(static_cast<size_t>(m), 0);
  for (int j = 0; j < m; ++j) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (x.value()[static_cast<size_t>(i) * m + j] >
          x.value()[static_cast<size_t>(best) * m + j])
        best = i;
    (*arg)[static_cast<size_t>(j)] = best;
    y.value()[static_cast<size_t>(j)] = x.value()[static_cast<size_t>(best) * m + j];
  }
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, arg, m]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int j = 0; j < m; ++j)
        xn->grad[static_cast<size_t>((*arg)[static_cast<size_t>(j)]) * m + j] +=
            yn->grad[static_cast<size_t>(j)];
    });
  }
  return y;
}

/// out[i][j] = m[i][j] / v[i]; v is rank-1 of length N.
template <class S>
Tensor<S> div_by_row(const Tensor<S>& x, const Tensor<S>& v) {
  detail::require_rank("div_by_row", x, 2);
  detail::require_rank("div_by_row", v, 1);
  const int n = x.dim(0), m = x.dim(1);
  if (v.dim(0) != n) op_shape_error("div_by_row", x.shape(), v.shape());
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  for (int i = 0; i < n; ++i) {
    const S inv = S(1) / v.value()[static_cast<size_t>(i)];
    const S* xr = &x.value()[static_cast<size_t>(i) * m];
    S* yr = &y.value()[static_cast<size_t>(i) * m];
    for (int j = 0; j < m; ++j) yr[j] = xr[j] * inv;
  }
  if (detail::tracked(x) || detail::tracked(v)) {
    y.set_requires_grad(true);
    auto xn = x.node(), vn = v.node(), yn = y.node();
    Tape<S>::active()->record([xn, vn, yn, n, m]() {
      for (int i = 0; i < n; ++i) {
        const S vi = vn->value[static_cast<size_t>(i)];
        const S inv = S(1) / vi;
        const S* g = &yn->grad[static_cast<size_t>(i) * m];
        if (xn->requires_grad) {
          xn->ensure_grad();
          S* xg = &xn->grad[static_cast<size_t>(i) * m];
          for (int j = 0; j < m; ++j) xg[j] += g[j] * inv;
        }
        if (vn->requires_grad) {
          vn->ensure_grad();
          S acc = S(0);
          const S* yv = &yn->value[static_cast<size_t>(i) * m];
          for (int j = 0; j < m; ++j) acc += g[j] * yv[j];
          vn->grad[static_cast<size_t>(i)] -= acc * inv;
        }
      }
    });
  }
  return y;
}

/// out[i][j] = m[i][j] - v[j]; v is rank-1 of length M (per-column offset).
template <class S>
Tensor<S> sub_colvec(const Tensor<S>& x, const Tensor<S>& v) {
  detail::require_rank("sub_colvec", x, 2);
  detail::require_rank("sub_colvec", v, 1);
  const int n = x.dim(0), m = x.dim(1);
  if (v.dim(0) != m) op_shape_error("sub_colvec", x.shape(), v.shape());
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      y.value()[static_cast<size_t>(i) * m + j] =
          x.value()[static_cast<size_t>(i) * m + j] - v.value()[static_cast<size_t>(j)];
  if (detail::tracked(x) || detail::tracked(v)) {
    y.set_requires_grad(true);
    auto xn = x.node(), vn = v.node(), yn = y.node();
    Tape<S>::active()->record([xn, vn, yn, n, m]() {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j)
            vn->grad[static_cast<size_t>(j)] -= yn->grad[static_cast<size_t>(i) * m + j];
      }
    });
  }
  return y;
}

/// Row subset of an [N,M] matrix.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<int> idx) {
  detail::require_rank("gather_rows", x, 2);
  const int m = x.dim(1);
  const int n_out = static_cast<int>(idx.size());
  Tensor<S> y = Tensor<S>::zeros({n_out, m});
  for (int i = 0; i < n_out; ++i)
    std::copy_n(&x.value()[static_cast<size_t>(idx[static_cast<size_t>(i)]) * m], m,
                &y.value()[static_cast<size_t>(i) * m]);
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    auto ix = std::make_shared<std::vector<int>>(std::move(idx));
    Tape<S>::active()->record([xn, yn, ix, m, n_out]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int i = 0; i < n_out; ++i) {
        S* xg = &xn->grad[static_cast<size_t>((*ix)[static_cast<size_t>(i)]) * m];
        const S* g = &yn->grad[static_cast<size_t>(i) * m];
        for (int j = 0; j < m; ++j) xg[j] += g[j];
      }
    });
  }
  return y;
}

/// [N,C,H,W] (N=1) -> [H*W, C] rows-are-positions matrix.
template <class S>
Tensor<S> chw_to_rows(const Tensor<S>& x) {
  detail::require_rank("chw_to_rows", x, 4);
  if (x.dim(0) != 1)
    throw std::invalid_argument("chw_to_rows: batch must be 1, got " +
                                shape_str(x.shape()));
  const int c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  Tensor<S> y = Tensor<S>::zeros({hw, c});
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < hw; ++p)
      y.value()[static_cast<size_t>(p) * c + ch] =
          x.value()[static_cast<size_t>(ch) * hw + p];
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, c, hw]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p)
          xn->grad[static_cast<size_t>(ch) * hw + p] +=
              yn->grad[static_cast<size_t>(p) * c + ch];
    });
  }
  return y;
}

/// [1,C,H,W] -> [C, H*W] matrix (contiguous reinterpret, copied).
template <class S>
Tensor<S> as_matrix_chw(const Tensor<S>& x) {
  detail::require_rank("as_matrix_chw", x, 4);
  if (x.dim(0) != 1)
    throw std::invalid_argument("as_matrix_chw: batch must be 1");
  const int c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> y = Tensor<S>::from({c, hw}, x.value());
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// image ops (NCHW)
// ---------------------------------------------------------------------------

/// 2-D convolution, zero padding. x [N,Ci,H,W], w [Co,Ci,kh,kw], optional
/// bias [Co] (pass undefined Tensor for none).
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int stride = 1, int pad = 0) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", w, 4);
  if (x.dim(1) != w.dim(1)) op_shape_error("conv2d", x.shape(), w.shape());
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0)
    throw std::invalid_argument("conv2d: empty output for input " + shape_str(x.shape()) +
                                " kernel " + shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co))
    throw std::invalid_argument("conv2d: bias must be [Co]");

  Tensor<S> y = Tensor<S>::zeros({n, co, ho, wo});
  const auto& xv = x.value();
  const auto& wv = w.value();
  auto& yv = y.value();

  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < co; ++oc) {
      S* yp = &yv[(static_cast<size_t>(b) * co + oc) * ho * wo];
      if (bias.defined()) {
        const S bv = bias.value()[static_cast<size_t>(oc)];
        for (int i = 0; i < ho * wo; ++i) yp[i] = bv;
      }
      for (int ic = 0; ic < ci; ++ic) {
        const S* xp = &xv[(static_cast<size_t>(b) * ci + ic) * h * wd];
        const S* wp = &wv[(static_cast<size_t>(oc) * ci + ic) * kh * kw];
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const S wval = wp[ky * kw + kx];
            if (wval == S(0)) continue;
            // valid output range so that iy/ix stay in-bounds
            int oy0 = std::max(0, (pad - ky + stride - 1) / stride);
            int oy1 = std::min(ho, (h - 1 - ky + pad) / stride + 1);
            int ox0 = std::max(0, (pad - kx + stride - 1) / stride);
            int ox1 = std::min(wo, (wd - 1 - kx + pad) / stride + 1);
            for (int oy = oy0; oy < oy1; ++oy) {
              const int iy = oy * stride + ky - pad;
              S* yrow = yp + static_cast<size_t>(oy) * wo;
              const S* xrow = xp + static_cast<size_t>(iy) * wd + (kx - pad);
              if (stride == 1) {
                for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wval * xrow[ox];
              } else {
                for (int ox = ox0; ox < ox1; ++ox)
                  yrow[ox] += wval * xrow[static_cast<size_t>(ox) * stride];
              }
            }
          }
      }
    }

  if (detail::tracked(x) || detail::tracked(w) || (bias.defined() && detail::tracked(bias))) {
    y.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), yn = y.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    Tape<S>::active()->record([xn, wn, bn, yn, n, ci, h, wd, co, kh, kw, ho, wo, stride,
                               pad]() {
      const auto& g = yn->grad;
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int b = 0; b < n; ++b)
          for (int oc = 0; oc < co; ++oc) {
            const S* gp = &g[(static_cast<size_t>(b) * co + oc) * ho * wo];
            S acc = S(0);
            for (int i = 0; i < ho * wo; ++i) acc += gp[i];
            bn->grad[static_cast<size_t>(oc)] += acc;
          }
      }
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      if (!xn->requires_grad && !wn->requires_grad) return;
      for (int b = 0; b < n; ++b)
        for (int oc = 0; oc < co; ++oc) {
          const S* gp = &g[(static_cast<size_t>(b) * co + oc) * ho * wo];
          for (int ic = 0; ic < ci; ++ic) {
            const S* xp = &xn->value[(static_cast<size_t>(b) * ci + ic) * h * wd];
            S* xg = xn->requires_grad
                        ? &xn->grad[(static_cast<size_t>(b) * ci + ic) * h * wd]
                        : nullptr;
            const S* wp = &wn->value[(static_cast<size_t>(oc) * ci + ic) * kh * kw];
            S* wg = wn->requires_grad
                        ? &wn->grad[(static_cast<size_t>(oc) * ci + ic) * kh * kw]
                        : nullptr;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const S wval = wp[ky * kw + kx];
                int oy0 = std::max(0, (pad - ky + stride - 1) / stride);
                int oy1 = std::min(ho, (h - 1 - ky + pad) / stride + 1);
                int ox0 = std::max(0, (pad - kx + stride - 1) / stride);
                int ox1 = std::min(wo, (wd - 1 - kx + pad) / stride + 1);
                S wacc = S(0);
                for (int oy = oy0; oy < oy1; ++oy) {
                  const int iy = oy * stride + ky - pad;
                  const S* grow = gp + static_cast<size_t>(oy) * wo;
                  const size_t base = static_cast<size_t>(iy) * wd + (kx - pad);
                  if (xg) {
                    S* xrow = xg + base;
                    if (stride == 1) {
                      for (int ox = ox0; ox < ox1; ++ox) xrow[ox] += wval * grow[ox];
                    } else {
                      for (int ox = ox0; ox < ox1; ++ox)
                        xrow[static_cast<size_t>(ox) * stride] += wval * grow[ox];
                    }
                  }
                  if (wg) {
                    const S* xrow = xp + base;
                    if (stride == 1) {
                      for (int ox = ox0; ox < ox1; ++ox) wacc += xrow[ox] * grow[ox];
                    } else {
                      for (int ox = ox0; ox < ox1; ++ox)
                        wacc += xrow[static_cast<size_t>(ox) * stride] * grow[ox];
                    }
                  }
                }
                if (wg) wg[ky * kw + kx] += wacc;
              }
          }
        }
    });
  }
  return y;
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride = 1, int pad = 0) {
  return conv2d(x, w, Tensor<S>(), stride, pad);
}

/// Nearest-neighbour 2x upsample: [N,C,H,W] -> [N,C,2H,2W].
template <class S>
Tensor<S> upsample_nearest2(const Tensor<S>& x) {
  detail::require_rank("upsample_nearest2", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<S> y = Tensor<S>::zeros({n, c, 2 * h, 2 * w});
  const auto& xv = x.value();
  auto& yv = y.value();
  for (int p = 0; p < n * c; ++p) {
    const S* xp = &xv[static_cast<size_t>(p) * h * w];
    S* yp = &yv[static_cast<size_t>(p) * 4 * h * w];
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) {
        const S v = xp[yy * w + xx];
        S* o = yp + static_cast<size_t>(2 * yy) * 2 * w + 2 * xx;
        o[0] = v;
        o[1] = v;
        o[2 * w] = v;
        o[2 * w + 1] = v;
      }
  }
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, n, c, h, w]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int p = 0; p < n * c; ++p) {
        S* xg = &xn->grad[static_cast<size_t>(p) * h * w];
        const S* gp = &yn->grad[static_cast<size_t>(p) * 4 * h * w];
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx) {
            const S* o = gp + static_cast<size_t>(2 * yy) * 2 * w + 2 * xx;
            xg[yy * w + xx] += o[0] + o[1] + o[2 * w] + o[2 * w + 1];
          }
      }
    });
  }
  return y;
}

/// 2x2 average pool, stride 2; odd trailing row/col dropped.
template <class S>
Tensor<S> avg_pool2(const Tensor<S>& x) {
  detail::require_rank("avg_pool2", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h / 2, wo = w / 2;
  Tensor<S> y = Tensor<S>::zeros({n, c, ho, wo});
  const auto& xv = x.value();
  auto& yv = y.value();
  for (int p = 0; p < n * c; ++p) {
    const S* xp = &xv[static_cast<size_t>(p) * h * w];
    S* yp = &yv[static_cast<size_t>(p) * ho * wo];
    for (int yy = 0; yy < ho; ++yy)
      for (int xx = 0; xx < wo; ++xx) {
        const S* i = xp + static_cast<size_t>(2 * yy) * w + 2 * xx;
        yp[yy * wo + xx] = (i[0] + i[1] + i[w] + i[w + 1]) * S(0.25);
      }
  }
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, n, c, h, w, ho, wo]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int p = 0; p < n * c; ++p) {
        S* xg = &xn->grad[static_cast<size_t>(p) * h * w];
        const S* gp = &yn->grad[static_cast<size_t>(p) * ho * wo];
        for (int yy = 0; yy < ho; ++yy)
          for (int xx = 0; xx < wo; ++xx) {
            const S g = gp[yy * wo + xx] * S(0.25);
            S* i = xg + static_cast<size_t>(2 * yy) * w + 2 * xx;
            i[0] += g;
            i[1] += g;
            i[w] += g;
            i[w + 1] += g;
          }
      }
    });
  }
  return y;
}

/// Global average pool: [N,C,H,W] -> [N,C,1,1].
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  detail::require_rank("global_avg_pool", x, 4);
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const S inv = S(1) / static_cast<S>(hw);
  Tensor<S> y = Tensor<S>::zeros({n, c, 1, 1});
  for (int p = 0; p < n * c; ++p) {
    S acc = S(0);
    const S* xp = &x.value()[static_cast<size_t>(p) * hw];
    for (int i = 0; i < hw; ++i) acc += xp[i];
    y.value()[static_cast<size_t>(p)] = acc * inv;
  }
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, n, c, hw, inv]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int p = 0; p < n * c; ++p) {
        const S g = yn->grad[static_cast<size_t>(p)] * inv;
        S* xg = &xn->grad[static_cast<size_t>(p) * hw];
        for (int i = 0; i < hw; ++i) xg[i] += g;
      }
    });
  }
  return y;
}

/// Replicate-pad the spatial dims by p on each side.
template <class S>
Tensor<S> replicate_pad(const Tensor<S>& x, int p) {
  detail::require_rank("replicate_pad", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h + 2 * p, wo = w + 2 * p;
  Tensor<S> y = Tensor<S>::zeros({n, c, ho, wo});
  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  for (int pl = 0; pl < n * c; ++pl) {
    const S* xp = &x.value()[static_cast<size_t>(pl) * h * w];
    S* yp = &y.value()[static_cast<size_t>(pl) * ho * wo];
    for (int yy = 0; yy < ho; ++yy) {
      const int sy = clampi(yy - p, 0, h - 1);
      for (int xx = 0; xx < wo; ++xx)
        yp[yy * wo + xx] = xp[sy * w + clampi(xx - p, 0, w - 1)];
    }
  }
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, n, c, h, w, ho, wo, p, clampi]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int pl = 0; pl < n * c; ++pl) {
        S* xg = &xn->grad[static_cast<size_t>(pl) * h * w];
        const S* gp = &yn->grad[static_cast<size_t>(pl) * ho * wo];
        for (int yy = 0; yy < ho; ++yy) {
          const int sy = clampi(yy - p, 0, h - 1);
          for (int xx = 0; xx < wo; ++xx)
            xg[sy * w + clampi(xx - p, 0, w - 1)] += gp[yy * wo + xx];
        }
      }
    });
  }
  return y;
}

/// Channel concatenation of same-size [N,Ci,H,W] tensors.
template <class S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int ctot = 0;
  for (const auto& x : xs) {
    detail::require_rank("concat_channels", x, 4);
    if (x.dim(0) != n || x.dim(2) != h || x.dim(3) != w)
      op_shape_error("concat_channels", xs[0].shape(), x.shape());
    ctot += x.dim(1);
  }
  Tensor<S> y = Tensor<S>::zeros({n, ctot, h, w});
  const int hw = h * w;
  bool any = false;
  for (const auto& x : xs) any = any || detail::tracked(x);
  int coff = 0;
  for (const auto& x : xs) {
    const int c = x.dim(1);
    for (int b = 0; b < n; ++b)
      std::copy_n(&x.value()[static_cast<size_t>(b) * c * hw],
                  static_cast<size_t>(c) * hw,
                  &y.value()[(static_cast<size_t>(b) * ctot + coff) * hw]);
    coff += c;
  }
  if (any) {
    y.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<S>>> nodes;
    nodes.reserve(xs.size());
    for (const auto& x : xs) nodes.push_back(x.node());
    auto yn = y.node();
    Tape<S>::active()->record([nodes, yn, n, ctot, hw]() {
      int off = 0;
      for (const auto& xn : nodes) {
        const int c = xn->shape[1];
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int b = 0; b < n; ++b) {
            const S* g = &yn->grad[(static_cast<size_t>(b) * ctot + off) * hw];
            S* xg = &xn->grad[static_cast<size_t>(b) * c * hw];
            for (int i = 0; i < c * hw; ++i) xg[i] += g[i];
          }
        }
        off += c;
      }
    });
  }
  return y;
}

/// Channels [start, start+count) of x.
template <class S>
Tensor<S> slice_channels(const Tensor<S>& x, int start, int count) {
  detail::require_rank("slice_channels", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (start < 0 || count <= 0 || start + count > c)
    throw std::invalid_argument("slice_channels: range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") out of " +
                                std::to_string(c));
  const int hw = h * w;
  Tensor<S> y = Tensor<S>::zeros({n, count, h, w});
  for (int b = 0; b < n; ++b)
    std::copy_n(&x.value()[(static_cast<size_t>(b) * c + start) * hw],
                static_cast<size_t>(count) * hw,
                &y.value()[static_cast<size_t>(b) * count * hw]);
  if (detail::tracked(x)) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    Tape<S>::active()->record([xn, yn, n, c, start, count, hw]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int b = 0; b < n; ++b) {
        S* xg = &xn->grad[(static_cast<size_t>(b) * c + start) * hw];
        const S* g = &yn->grad[static_cast<size_t>(b) * count * hw];
        for (int i = 0; i < count * hw; ++i) xg[i] += g[i];
      }
    });
  }
  return y;
}

/// Bilinear sampling at continuous absolute pixel coordinates with edge
/// clamping. x [N,C,H,W]; gx, gy [N,1,Ho,Wo]. Differentiable in x and in the
/// coordinates (coordinate gradient is zero where clamped off the frame).
template <class S>
Tensor<S> grid_sample(const Tensor<S>& x, const Tensor<S>& gx, const Tensor<S>& gy) {
  detail::require_rank("grid_sample", x, 4);
  detail::require_rank("grid_sample", gx, 4);
  if (gx.shape() != gy.shape()) op_shape_error("grid_sample", gx.shape(), gy.shape());
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gx.dim(0) != n || gx.dim(1) != 1)
    throw std::invalid_argument("grid_sample: coord tensors must be [N,1,Ho,Wo]");
  const int ho = gx.dim(2), wo = gx.dim(3);
  const int hwo = ho * wo;
  Tensor<S> y = Tensor<S>::zeros({n, c, ho, wo});

  const auto& xv = x.value();
  const auto& gxv = gx.value();
  const auto& gyv = gy.value();
  auto& yv = y.value();

  for (int b = 0; b < n; ++b) {
    const S* gxb = &gxv[static_cast<size_t>(b) * hwo];
    const S* gyb = &gyv[static_cast<size_t>(b) * hwo];
    for (int p = 0; p < hwo; ++p) {
      S xc = gxb[p], yc = gyb[p];
      if (xc < S(0)) xc = S(0);
      if (xc > S(w - 1)) xc = S(w - 1);
      if (yc < S(0)) yc = S(0);
      if (yc > S(h - 1)) yc = S(h - 1);
      int x0 = static_cast<int>(std::floor(xc));
      int y0 = static_cast<int>(std::floor(yc));
      if (x0 > w - 2) x0 = w - 2;
      if (y0 > h - 2) y0 = h - 2;
      if (x0 < 0) x0 = 0;
      if (y0 < 0) y0 = 0;
      const S fx = xc - static_cast<S>(x0);
      const S fy = yc - static_cast<S>(y0);
      for (int ch = 0; ch < c; ++ch) {
        const S* xp = &xv[(static_cast<size_t>(b) * c + ch) * h * w];
        const S v00 = xp[y0 * w + x0], v01 = xp[y0 * w + x0 + 1];
        const S v10 = xp[(y0 + 1) * w + x0], v11 = xp[(y0 + 1) * w + x0 + 1];
        yv[(static_cast<size_t>(b) * c + ch) * hwo + p] =
            (S(1) - fy) * ((S(1) - fx) * v00 + fx * v01) +
            fy * ((S(1) - fx) * v10 + fx * v11);
      }
    }
  }

  if (detail::tracked(x) || detail::tracked(gx) || detail::tracked(gy)) {
    y.set_requires_grad(true);
    auto xn = x.node(), gxn = gx.node(), gyn = gy.node(), yn = y.node();
    Tape<S>::active()->record([xn, gxn, gyn, yn, n, c, h, w, ho, wo, hwo]() {
      const bool gx_rg = gxn->requires_grad, gy_rg = gyn->requires_grad,
                 x_rg = xn->requires_grad;
      if (x_rg) xn->ensure_grad();
      if (gx_rg) gxn->ensure_grad();
      if (gy_rg) gyn->ensure_grad();
      for (int b = 0; b < n; ++b) {
        const S* gxb = &gxn->value[static_cast<size_t>(b) * hwo];
        const S* gyb = &gyn->value[static_cast<size_t>(b) * hwo];
        for (int p = 0; p < hwo; ++p) {
          S xc = gxb[p], yc = gyb[p];
          const bool cx = (xc < S(0) || xc > S(w - 1));
          const bool cy = (yc < S(0) || yc > S(h - 1));
          if (xc < S(0)) xc = S(0);
          if (xc > S(w - 1)) xc = S(w - 1);
          if (yc < S(0)) yc = S(0);
          if (yc > S(h - 1)) yc = S(h - 1);
          int x0 = static_cast<int>(std::floor(xc));
          int y0 = static_cast<int>(std::floor(yc));
          if (x0 > w - 2) x0 = w - 2;
          if (y0 > h - 2) y0 = h - 2;
          if (x0 < 0) x0 = 0;
          if (y0 < 0) y0 = 0;
          const S fx = xc - static_cast<S>(x0);
          const S fy = yc - static_cast<S>(y0);
          S dx_acc = S(0), dy_acc = S(0);
          for (int ch = 0; ch < c; ++ch) {
            const S g = yn->grad[(static_cast<size_t>(b) * c + ch) * hwo + p];
            if (g == S(0)) continue;
            const size_t base = (static_cast<size_t>(b) * c + ch) * h * w;
            const S* xp = &xn->value[base];
            const S v00 = xp[y0 * w + x0], v01 = xp[y0 * w + x0 + 1];
            const S v10 = xp[(y0 + 1) * w + x0], v11 = xp[(y0 + 1) * w + x0 + 1];
            if (x_rg) {
              S* xg = &xn->grad[base];
              xg[y0 * w + x0] += g * (S(1) - fy) * (S(1) - fx);
              xg[y0 * w + x0 + 1] += g * (S(1) - fy) * fx;
              xg[(y0 + 1) * w + x0] += g * fy * (S(1) - fx);
              xg[(y0 + 1) * w + x0 + 1] += g * fy * fx;
            }
            dx_acc += g * ((S(1) - fy) * (v01 - v00) + fy * (v11 - v10));
            dy_acc += g * ((S(1) - fx) * (v10 - v00) + fx * (v11 - v01));
          }
          if (gx_rg && !cx) gxn->grad[static_cast<size_t>(b) * hwo + p] += dx_acc;
          if (gy_rg && !cy) gyn->grad[static_cast<size_t>(b) * hwo + p] += dy_acc;
        }
      }
    });
  }
  return y;
}

}  // namespace metastab
