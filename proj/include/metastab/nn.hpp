#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metastab/tensor.hpp"
#include "metastab/util.hpp"

namespace metastab::nn {

/// Named, ordered collection of learnable tensors. Order is the update and
/// serialization order, so it must be stable.
template <class S>
class ParamSet {
 public:
  void add(std::string name, Tensor<S> t) {
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), std::move(t));
  }

  size_t size() const { return entries_.size(); }
  const std::pair<std::string, Tensor<S>>& operator[](size_t i) const {
    return entries_[i];
  }
  std::pair<std::string, Tensor<S>>& operator[](size_t i) { return entries_[i]; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  /// p <- p - lr * g for every parameter, then zero the gradients.
  /// Throws if any parameter has no populated gradient.
  void sgd_step(S lr) {
    for (auto& [name, t] : entries_) {
      if (!t.has_grad())
        throw std::runtime_error("sgd_step: missing gradient for parameter " + name);
    }
    for (auto& [name, t] : entries_) {
      auto& v = t.value();
      auto& g = t.grad();
      for (size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
      t.zero_grad();
    }
  }

  /// Deep copy; copies values, drops gradients, keeps requires_grad.
  ParamSet clone() const {
    ParamSet out;
    for (const auto& [name, t] : entries_) out.add(name, t.clone_detached(true));
    return out;
  }

  /// Copy values from another set with identical structure.
  void assign_values(const ParamSet& src) {
    if (src.size() != size())
      throw std::runtime_error("assign_values: parameter count mismatch");
    for (size_t i = 0; i < entries_.size(); ++i) {
      if (src[i].second.numel() != entries_[i].second.numel())
        throw std::runtime_error("assign_values: size mismatch at " + entries_[i].first);
      entries_[i].second.value() = src[i].second.value();
    }
  }

  std::vector<S> flatten_values() const {
    std::vector<S> out;
    out.reserve(static_cast<size_t>(total_scalars()));
    for (const auto& [_, t] : entries_)
      out.insert(out.end(), t.value().begin(), t.value().end());
    return out;
  }

  std::vector<S> flatten_grads() const {
    std::vector<S> out;
    out.reserve(static_cast<size_t>(total_scalars()));
    for (const auto& [_, t] : entries_) {
      if (t.has_grad()) {
        const auto& n = *t.node();
        out.insert(out.end(), n.grad.begin(), n.grad.end());
      } else {
        out.insert(out.end(), static_cast<size_t>(t.numel()), S(0));
      }
    }
    return out;
  }

  void assign_flat(const std::vector<S>& flat) {
    size_t off = 0;
    for (auto& [_, t] : entries_) {
      std::copy_n(flat.begin() + off, t.numel(), t.value().begin());
      off += static_cast<size_t>(t.numel());
    }
  }

  void add_to_values(const std::vector<S>& delta, S factor) {
    size_t off = 0;
    for (auto& [_, t] : entries_) {
      auto& v = t.value();
      for (size_t i = 0; i < v.size(); ++i) v[i] += factor * delta[off + i];
      off += v.size();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> entries_;
};

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

template <class S>
void fill_normal(Tensor<S>& t, Rng& rng, double std) {
  for (auto& v : t.value()) v = static_cast<S>(rng.normal(0.0, std));
}

/// He-style init for conv weights [Co,Ci,kh,kw].
template <class S>
void init_he(Tensor<S>& w, Rng& rng) {
  const int fan_in = w.dim(1) * w.dim(2) * w.dim(3);
  fill_normal(w, rng, std::sqrt(2.0 / fan_in));
}

/// Orthogonal init: rows of the [Co, Ci*kh*kw] flattening are orthonormal
/// (columns when Co > fan_in), scaled by `gain`. Deterministic given rng.
template <class S>
void init_orthogonal(Tensor<S>& w, Rng& rng, double gain = 1.0) {
  const int rows = w.dim(0);
  const int cols = static_cast<int>(w.numel() / rows);
  const bool wide = rows > cols;
  const int n = wide ? cols : rows;  // number of vectors to orthonormalize
  const int d = wide ? rows : cols;  // their dimension
  std::vector<double> m(static_cast<size_t>(n) * d);
  for (auto& v : m) v = rng.normal();
  // modified Gram-Schmidt
  for (int i = 0; i < n; ++i) {
    double* vi = &m[static_cast<size_t>(i) * d];
    for (int j = 0; j < i; ++j) {
      const double* vj = &m[static_cast<size_t>(j) * d];
      double dot = 0;
      for (int k = 0; k < d; ++k) dot += vi[k] * vj[k];
      for (int k = 0; k < d; ++k) vi[k] -= dot * vj[k];
    }
    double nrm = 0;
    for (int k = 0; k < d; ++k) nrm += vi[k] * vi[k];
    nrm = std::sqrt(std::max(nrm, 1e-12));
    for (int k = 0; k < d; ++k) vi[k] /= nrm;
  }
  auto& wv = w.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      wv[static_cast<size_t>(r) * cols + c] = static_cast<S>(
          gain * (wide ? m[static_cast<size_t>(c) * d + r] : m[static_cast<size_t>(r) * d + c]));
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <class S>
struct Conv2d {
  Tensor<S> w, b;
  int stride = 1, pad = 0;

  static Conv2d make(int ci, int co, int k, int stride, int pad, Rng& rng,
                     bool zero_init = false) {
    Conv2d c;
    c.w = Tensor<S>::zeros({co, ci, k, k});
    c.b = Tensor<S>::zeros({co});
    if (!zero_init) init_he(c.w, rng);
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, stride, pad); }

  void register_params(ParamSet<S>& ps, const std::string& prefix) {
    ps.add(prefix + ".w", w);
    ps.add(prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

/// Adam over a flat gradient vector; the caller owns aggregation.
template <class S>
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamSet<S>& params, const std::vector<S>& grad) {
    if (m_.empty()) {
      m_.assign(grad.size(), 0.0);
      v_.assign(grad.size(), 0.0);
    }
    if (grad.size() != m_.size()) throw std::runtime_error("Adam: gradient size changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    size_t off = 0;
    for (auto& [_, p] : params) {
      auto& val = p.value();
      for (size_t i = 0; i < val.size(); ++i) {
        const double g = static_cast<double>(grad[off + i]);
        m_[off + i] = b1_ * m_[off + i] + (1.0 - b1_) * g;
        v_[off + i] = b2_ * v_[off + i] + (1.0 - b2_) * g * g;
        const double mh = m_[off + i] / bc1;
        const double vh = v_[off + i] / bc2;
        val[i] -= static_cast<S>(lr_ * mh / (std::sqrt(vh) + eps_));
      }
      off += val.size();
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<double> m_, v_;
};

// ---------------------------------------------------------------------------
// MSTB checkpoints
// ---------------------------------------------------------------------------

/// Raw named-tensor table as stored in an MSTB file (f32 payload).
struct CheckpointTable {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Entry> entries;

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

/// MSTB format: "MSTB" magic, u32 version, u32 count, then per tensor
/// u32 name length + UTF-8 name, u32 rank, rank x u32 dims, little-endian
/// f32 payload. Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const CheckpointTable& table);
CheckpointTable load_checkpoint(const std::filesystem::path& path);

template <class S>
CheckpointTable to_table(const ParamSet<S>& params) {
  CheckpointTable t;
  for (const auto& [name, p] : params) {
    CheckpointTable::Entry e;
    e.name = name;
    e.shape = p.shape();
    e.data.reserve(p.value().size());
    for (S v : p.value()) e.data.push_back(static_cast<float>(v));
    t.entries.push_back(std::move(e));
  }
  return t;
}

template <class S>
void load_into(const CheckpointTable& table, ParamSet<S>& params) {
  for (auto& [name, p] : params) {
    const auto* e = table.find(name);
    if (!e) throw std::runtime_error("checkpoint: missing parameter " + name);
    if (e->shape != p.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file " +
                               shape_str(e->shape) + " vs model " + shape_str(p.shape()));
    auto& v = p.value();
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(e->data[i]);
  }
}

template <class S>
void save_params(const std::filesystem::path& path, const ParamSet<S>& params) {
  save_checkpoint(path, to_table(params));
}

template <class S>
void load_params(const std::filesystem::path& path, ParamSet<S>& params) {
  load_into(load_checkpoint(path), params);
}

}  // namespace metastab::nn
