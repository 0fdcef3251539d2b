#pragma once

// Reverse-mode differentiation over row-major matrices.
//
// A Tape records every op executed through it together with a closure that
// propagates the output adjoint back to the inputs. Tapes are single use:
// build one per step, call backward() once, drop it. Parameter leaves are
// bound to a ParamStore, and backward() accumulates their adjoints into the
// store's gradient slots.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "flow4d/common.hpp"

namespace flow4d {

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  Matrix<T> adam_m;
  Matrix<T> adam_v;
  bool trainable = true;  // false for running statistics
};

template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Matrix<T> value, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Parameter<T> p;
    p.name = name;
    p.grad = Matrix<T>(value.rows, value.cols);
    p.adam_m = Matrix<T>(value.rows, value.cols);
    p.adam_v = Matrix<T>(value.rows, value.cols);
    p.value = std::move(value);
    p.trainable = trainable;
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t num_scalars(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (!trainable_only || p.trainable) n += p.value.size();
    }
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
    grads_ready_ = false;
  }

  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }
  bool grads_ready() const { return grads_ready_; }
  void mark_grads_ready() { grads_ready_ = true; }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p.name, p.value.template cast<U>(), p.trainable);
      q.adam_m = p.adam_m.template cast<U>();
      q.adam_v = p.adam_v.template cast<U>();
    }
    out.set_step(step_);
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  int64_t step_ = 0;
  bool grads_ready_ = false;
};

// ---------------------------------------------------------------------------
// Tape

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Freezes ReLU masks across repeated evaluations so finite differences never
// straddle a kink: the first pass records, later passes replay.
struct KinkFreeze {
  std::vector<std::vector<uint8_t>> masks;
  std::size_t cursor = 0;
  bool replay = false;

  void start_replay() {
    replay = true;
    cursor = 0;
  }
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// BatchNorm uses batch statistics (and updates running ones) when true.
  bool training = true;
  KinkFreeze* kink_freeze = nullptr;

  bool recording() const { return record_; }

  Var constant(Matrix<T> value) { return push(std::move(value), false); }

  /// A leaf that receives a gradient (used for input-gradient checks).
  Var input(Matrix<T> value) { return push(std::move(value), record_); }

  Var param(ParamStore<T>& store, const std::string& name) {
    const std::string key = std::to_string(reinterpret_cast<std::uintptr_t>(&store)) + "/" + name;
    if (auto it = param_leaves_.find(key); it != param_leaves_.end()) return it->second;
    Parameter<T>& p = store.at(name);
    Var v = push(p.value, record_ && p.trainable);
    nodes_[v.id].param = &p;
    param_leaves_.emplace(key, v);
    if (std::find(stores_.begin(), stores_.end(), &store) == stores_.end()) stores_.push_back(&store);
    return v;
  }

  /// Records an op. The closure runs during backward() only if the output
  /// requires a gradient, and may call grad() on inputs that require one.
  Var record(Matrix<T> value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }
  Var record(Matrix<T> value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    if (record_) {
      for (Var in : inputs) needs = needs || requires_grad(in);
    }
    Var v = push(std::move(value), needs);
    if (needs) nodes_[v.id].backward = std::move(backward);
    return v;
  }

  const Matrix<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Adjoint of `v`, allocated as zeros on first access.
  Matrix<T>& grad(Var v) {
    Node& n = node(v);
    if (!n.grad_allocated) {
      n.grad = Matrix<T>(n.value.rows, n.value.cols);
      n.grad_allocated = true;
    }
    return n.grad;
  }
  bool has_grad(Var v) const { return node(v).grad_allocated; }

  std::size_t size() const { return nodes_.size(); }

  /// Propagates d(loss)/d(.) to every recorded node and accumulates parameter
  /// gradients into their stores. Parameters that the loss does not reach get
  /// a zero gradient.
  void backward(Var loss) {
    if (used_) throw std::logic_error("tape already consumed by backward()");
    used_ = true;
    const Node& l = node(loss);
    if (l.value.rows != 1 || l.value.cols != 1) {
      throw std::invalid_argument("backward() needs a scalar loss, got " + shape_str(l.value));
    }
    if (l.requires_grad) {
      grad(loss)(0, 0) = T(1);
      for (int32_t id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.backward && n.grad_allocated) n.backward(*this);
      }
    }
    for (auto& n : nodes_) {
      if (n.param && n.requires_grad && n.grad_allocated) {
        auto& g = n.param->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
      }
    }
    for (auto* s : stores_) s->mark_grads_ready();
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool grad_allocated = false;
    bool requires_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  Var push(Matrix<T> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }
  Node& node(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("bad tape reference");
    return nodes_[v.id];
  }
  const Node& node(Var v) const { return const_cast<Tape*>(this)->node(v); }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, Var> param_leaves_;
  std::vector<ParamStore<T>*> stores_;
  bool record_ = true;
  bool used_ = false;
};

// ---------------------------------------------------------------------------
// Dense ops

namespace ops {

/// x [N x in] * W [in x out] + b [1 x out]. Pass an invalid `b` for no bias.
template <typename T>
Var linear(Tape<T>& tape, Var x, Var W, Var b = {}) {
  const Matrix<T>& xv = tape.value(x);
  const Matrix<T>& wv = tape.value(W);
  if (xv.cols != wv.rows) {
    throw std::invalid_argument("linear: input " + shape_str(xv) + " vs weight " + shape_str(wv));
  }
  if (b.valid() && (tape.value(b).rows != 1 || tape.value(b).cols != wv.cols)) {
    throw std::invalid_argument("linear: bias shape " + shape_str(tape.value(b)));
  }
  const std::size_t n = xv.rows, in = xv.cols, out = wv.cols;
  Matrix<T> y(n, out);
  if (b.valid()) {
    const T* bias = tape.value(b).data.data();
    for (std::size_t r = 0; r < n; ++r) std::copy(bias, bias + out, y.row(r));
  }
#pragma omp parallel for schedule(static) if (n * in * out > 65536)
  for (std::size_t r = 0; r < n; ++r) {
    T* yr = y.row(r);
    const T* xr = xv.row(r);
    for (std::size_t k = 0; k < in; ++k) {
      const T a = xr[k];
      const T* wr = wv.row(k);
      for (std::size_t c = 0; c < out; ++c) yr[c] += a * wr[c];
    }
  }
  std::vector<Var> inputs{x, W};
  if (b.valid()) inputs.push_back(b);
  return tape.record(std::move(y), inputs, [x, W, b, n, in, out, self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    if (t.requires_grad(x)) {
      Matrix<T>& gx = t.grad(x);
      const Matrix<T>& wv = t.value(W);
#pragma omp parallel for schedule(static) if (n * in * out > 65536)
      for (std::size_t r = 0; r < n; ++r) {
        const T* gr = g.row(r);
        T* gxr = gx.row(r);
        for (std::size_t k = 0; k < in; ++k) {
          const T* wr = wv.row(k);
          T acc = 0;
          for (std::size_t c = 0; c < out; ++c) acc += gr[c] * wr[c];
          gxr[k] += acc;
        }
      }
    }
    if (t.requires_grad(W)) {
      Matrix<T>& gw = t.grad(W);
      const Matrix<T>& xv = t.value(x);
#pragma omp parallel for schedule(static) if (n * in * out > 65536)
      for (std::size_t k = 0; k < in; ++k) {
        T* gwr = gw.row(k);
        for (std::size_t r = 0; r < n; ++r) {
          const T a = xv(r, k);
          if (a == T(0)) continue;
          const T* gr = g.row(r);
          for (std::size_t c = 0; c < out; ++c) gwr[c] += a * gr[c];
        }
      }
    }
    if (b.valid() && t.requires_grad(b)) {
      Matrix<T>& gb = t.grad(b);
      for (std::size_t r = 0; r < n; ++r) {
        const T* gr = g.row(r);
        for (std::size_t c = 0; c < out; ++c) gb.data[c] += gr[c];
      }
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const Matrix<T>& xv = tape.value(x);
  std::vector<uint8_t> mask(xv.size());
  if (tape.kink_freeze && tape.kink_freeze->replay) {
    auto& kf = *tape.kink_freeze;
    if (kf.cursor >= kf.masks.size() || kf.masks[kf.cursor].size() != xv.size()) {
      throw std::logic_error("relu: frozen mask sequence does not match this evaluation");
    }
    mask = kf.masks[kf.cursor++];
  } else {
    for (std::size_t i = 0; i < xv.size(); ++i) mask[i] = xv.data[i] > T(0);
    if (tape.kink_freeze) tape.kink_freeze->masks.push_back(mask);
  }
  Matrix<T> y(xv.rows, xv.cols);
  for (std::size_t i = 0; i < xv.size(); ++i) y.data[i] = mask[i] ? xv.data[i] : T(0);
  return tape.record(std::move(y), {x}, [x, mask = std::move(mask), self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    Matrix<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mask[i]) gx.data[i] += g.data[i];
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Matrix<T>& av = tape.value(a);
  const Matrix<T>& bv = tape.value(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("add: " + shape_str(av) + " vs " + shape_str(bv));
  Matrix<T> y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += bv.data[i];
  return tape.record(std::move(y), {a, b}, [a, b, self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Matrix<T>& gv = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv.data[i] += g.data[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T s) {
  Matrix<T> y = tape.value(x);
  for (auto& v : y.data) v *= s;
  return tape.record(std::move(y), {x}, [x, s, self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    Matrix<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] += s * g.data[i];
  });
}

/// Horizontal concatenation [a | b].
template <typename T>
Var concat_cols(Tape<T>& tape, Var a, Var b) {
  const Matrix<T>& av = tape.value(a);
  const Matrix<T>& bv = tape.value(b);
  if (av.rows != bv.rows) throw std::invalid_argument("concat_cols: row mismatch");
  const std::size_t ca = av.cols, cb = bv.cols;
  Matrix<T> y(av.rows, ca + cb);
  for (std::size_t r = 0; r < av.rows; ++r) {
    std::copy(av.row(r), av.row(r) + ca, y.row(r));
    std::copy(bv.row(r), bv.row(r) + cb, y.row(r) + ca);
  }
  return tape.record(std::move(y), {a, b}, [a, b, ca, cb, self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    if (t.requires_grad(a)) {
      Matrix<T>& ga = t.grad(a);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < ca; ++c) ga(r, c) += g(r, c);
    }
    if (t.requires_grad(b)) {
      Matrix<T>& gb = t.grad(b);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < cb; ++c) gb(r, c) += g(r, ca + c);
    }
  });
}

/// Vertical concatenation of matrices with equal column counts.
template <typename T>
Var concat_rows(Tape<T>& tape, const std::vector<Var>& parts, std::size_t cols) {
  std::size_t rows = 0;
  for (Var p : parts) {
    if (tape.value(p).cols != cols && tape.value(p).rows != 0) throw std::invalid_argument("concat_rows: column mismatch");
    rows += tape.value(p).rows;
  }
  Matrix<T> y(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t r0 = 0;
  for (Var p : parts) {
    const Matrix<T>& pv = tape.value(p);
    std::copy(pv.data.begin(), pv.data.end(), y.data.begin() + r0 * cols);
    offsets.push_back(r0);
    r0 += pv.rows;
  }
  return tape.record(std::move(y), parts, [parts, offsets, cols, self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!t.requires_grad(parts[k])) continue;
      Matrix<T>& gp = t.grad(parts[k]);
      const T* src = g.data.data() + offsets[k] * cols;
      for (std::size_t i = 0; i < gp.size(); ++i) gp.data[i] += src[i];
    }
  });
}

/// out[r] = x[index[r]], or a zero row where index[r] < 0.
template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<int32_t> index) {
  const Matrix<T>& xv = tape.value(x);
  const std::size_t c = xv.cols;
  Matrix<T> y(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const int32_t src = index[r];
    if (src < 0) continue;
    if (static_cast<std::size_t>(src) >= xv.rows) throw std::out_of_range("gather_rows: index out of range");
    std::copy(xv.row(src), xv.row(src) + c, y.row(r));
  }
  return tape.record(std::move(y), {x}, [x, c, index = std::move(index), self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    Matrix<T>& gx = t.grad(x);
    for (std::size_t r = 0; r < index.size(); ++r) {
      if (index[r] < 0) continue;
      T* dst = gx.row(index[r]);
      const T* src = g.row(r);
      for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
    }
  });
}

/// Row groups as CSR: group g owns members[offsets[g] .. offsets[g+1]).
struct RowGroups {
  std::vector<int32_t> offsets{0};
  std::vector<int32_t> members;

  std::size_t num_groups() const { return offsets.size() - 1; }
};

/// out[g] = mean of x over the rows of group g (zero for an empty group).
/// Member order is the summation order.
template <typename T>
Var group_mean(Tape<T>& tape, Var x, std::shared_ptr<const RowGroups> groups) {
  const Matrix<T>& xv = tape.value(x);
  const std::size_t c = xv.cols, ng = groups->num_groups();
  Matrix<T> y(ng, c);
  for (std::size_t g = 0; g < ng; ++g) {
    const int32_t b = groups->offsets[g], e = groups->offsets[g + 1];
    if (e == b) continue;
    T* yr = y.row(g);
    for (int32_t m = b; m < e; ++m) {
      const T* xr = xv.row(groups->members[m]);
      for (std::size_t k = 0; k < c; ++k) yr[k] += xr[k];
    }
    const T inv = T(1) / T(e - b);
    for (std::size_t k = 0; k < c; ++k) yr[k] *= inv;
  }
  return tape.record(std::move(y), {x}, [x, c, groups, self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    Matrix<T>& gx = t.grad(x);
    for (std::size_t grp = 0; grp < groups->num_groups(); ++grp) {
      const int32_t b = groups->offsets[grp], e = groups->offsets[grp + 1];
      if (e == b) continue;
      const T inv = T(1) / T(e - b);
      const T* gr = g.row(grp);
      for (int32_t m = b; m < e; ++m) {
        T* dst = gx.row(groups->members[m]);
        for (std::size_t k = 0; k < c; ++k) dst[k] += gr[k] * inv;
      }
    }
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const Matrix<T>& xv = tape.value(x);
  T s = 0;
  for (T v : xv.data) s += v;
  Matrix<T> y(1, 1, s);
  return tape.record(std::move(y), {x}, [x, self = int32_t(tape.size())](Tape<T>& t) {
    const T g = t.grad(Var{self})(0, 0);
    for (auto& v : t.grad(x).data) v += g;
  });
}

template <typename T>
Var mean(Tape<T>& tape, Var x) {
  const std::size_t n = tape.value(x).size();
  if (n == 0) return tape.constant(Matrix<T>(1, 1));
  return scale(tape, sum(tape, x), T(1) / T(n));
}

/// sum_i w_i * x_i over all entries, with w a constant of the same shape.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, Matrix<T> weights) {
  const Matrix<T>& xv = tape.value(x);
  if (!xv.same_shape(weights)) throw std::invalid_argument("weighted_sum: shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += weights.data[i] * xv.data[i];
  return tape.record(Matrix<T>(1, 1, s), {x}, [x, w = std::move(weights), self = int32_t(tape.size())](Tape<T>& t) {
    const T g = t.grad(Var{self})(0, 0);
    Matrix<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += g * w.data[i];
  });
}

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-column batch normalization over all rows. In training mode the batch
/// statistics are used and differentiated; running statistics are updated
/// but never differentiated. In inference mode the running statistics are
/// used. An empty batch passes through unchanged.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, Parameter<T>& running_mean,
               Parameter<T>& running_var, BatchNormOptions opt = {}) {
  const Matrix<T>& xv = tape.value(x);
  const std::size_t n = xv.rows, c = xv.cols;
  const Matrix<T>& gv = tape.value(gamma);
  const Matrix<T>& bv = tape.value(beta);
  if (gv.size() != c || bv.size() != c || running_mean.value.size() != c || running_var.value.size() != c) {
    throw std::invalid_argument("batch_norm: channel mismatch, input " + shape_str(xv));
  }
  if (n == 0) return tape.record(Matrix<T>(0, c), {x, gamma, beta}, [](Tape<T>&) {});

  std::vector<T> mu(c, T(0)), inv_std(c, T(0));
  const bool training = tape.training;
  if (training) {
    for (std::size_t r = 0; r < n; ++r) {
      const T* xr = xv.row(r);
      for (std::size_t k = 0; k < c; ++k) mu[k] += xr[k];
    }
    for (auto& m : mu) m /= T(n);
    std::vector<T> var(c, T(0));
    for (std::size_t r = 0; r < n; ++r) {
      const T* xr = xv.row(r);
      for (std::size_t k = 0; k < c; ++k) {
        const T d = xr[k] - mu[k];
        var[k] += d * d;
      }
    }
    for (std::size_t k = 0; k < c; ++k) {
      var[k] /= T(n);
      inv_std[k] = T(1) / std::sqrt(var[k] + T(opt.eps));
      const T unbiased = n > 1 ? var[k] * T(n) / T(n - 1) : var[k];
      running_mean.value.data[k] = T(1 - opt.momentum) * running_mean.value.data[k] + T(opt.momentum) * mu[k];
      running_var.value.data[k] = T(1 - opt.momentum) * running_var.value.data[k] + T(opt.momentum) * unbiased;
    }
  } else {
    for (std::size_t k = 0; k < c; ++k) {
      mu[k] = running_mean.value.data[k];
      inv_std[k] = T(1) / std::sqrt(running_var.value.data[k] + T(opt.eps));
    }
  }

  Matrix<T> xhat(n, c), y(n, c);
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = xv.row(r);
    for (std::size_t k = 0; k < c; ++k) {
      const T h = (xr[k] - mu[k]) * inv_std[k];
      xhat(r, k) = h;
      y(r, k) = gv.data[k] * h + bv.data[k];
    }
  }
  return tape.record(std::move(y), {x, gamma, beta},
                     [x, gamma, beta, n, c, training, inv_std = std::move(inv_std), xhat = std::move(xhat),
                      self = int32_t(tape.size())](Tape<T>& t) {
    const Matrix<T>& g = t.grad(Var{self});
    const Matrix<T>& gv = t.value(gamma);
    std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < c; ++k) {
        sum_g[k] += g(r, k);
        sum_gx[k] += g(r, k) * xhat(r, k);
      }
    }
    if (t.requires_grad(gamma)) {
      auto& gg = t.grad(gamma);
      for (std::size_t k = 0; k < c; ++k) gg.data[k] += sum_gx[k];
    }
    if (t.requires_grad(beta)) {
      auto& gb = t.grad(beta);
      for (std::size_t k = 0; k < c; ++k) gb.data[k] += sum_g[k];
    }
    if (t.requires_grad(x)) {
      Matrix<T>& gx = t.grad(x);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t k = 0; k < c; ++k) {
          const T scale = gv.data[k] * inv_std[k];
          if (training) {
            gx(r, k) += scale * (g(r, k) - sum_g[k] / T(n) - xhat(r, k) * sum_gx[k] / T(n));
          } else {
            gx(r, k) += scale * g(r, k);
          }
        }
      }
    }
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) throw std::invalid_argument("Adam betas must lie in (0,1)");
    if (lr < 0) throw std::invalid_argument("learning rate must be non-negative");
    if (!(eps > 0)) throw std::invalid_argument("Adam eps must be positive");
  }
};

/// Bias-corrected Adam update of every trainable parameter; zeroes the
/// gradients and advances the step counter afterwards.
template <typename T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg) {
  cfg.validate();
  if (!store.grads_ready()) throw std::logic_error("adam_step: gradients have not been populated");
  const int64_t step = store.step() + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (auto& p : store.params()) {
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad.data[i];
      const double m = cfg.beta1 * p.adam_m.data[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * p.adam_v.data[i] + (1.0 - cfg.beta2) * g * g;
      p.adam_m.data[i] = static_cast<T>(m);
      p.adam_v.data[i] = static_cast<T>(v);
      const double update = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      p.value.data[i] = static_cast<T>(p.value.data[i] - update);
    }
  }
  store.zero_grad();
  store.set_step(step);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tol = 1e-4;
  // relative errors are taken against max(|analytic|, |numeric|, floor)
  double floor = 1e-6;
  // indices to check; empty means all
  std::vector<std::size_t> indices;
};

/// `f(x, grad)` returns the scalar value at x and, when `grad` is non-null,
/// writes the analytic gradient into it. Central differences use step h.
template <typename F>
GradCheckReport grad_check(F&& f, std::vector<double> x, const GradCheckOptions& opt) {
  std::vector<double> analytic(x.size(), 0.0);
  const double f0 = f(std::span<const double>(x), &analytic);
  if (!std::isfinite(f0)) throw std::runtime_error("grad_check: non-finite function value");

  std::vector<std::size_t> idx = opt.indices;
  if (idx.empty()) {
    idx.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) idx[i] = i;
  }
  GradCheckReport rep;
  for (std::size_t i : idx) {
    if (i >= x.size()) throw std::out_of_range("grad_check: index out of range");
    if (!std::isfinite(analytic[i])) throw std::runtime_error("grad_check: non-finite analytic gradient");
    const double orig = x[i];
    x[i] = orig + opt.step;
    const double fp = f(std::span<const double>(x), nullptr);
    x[i] = orig - opt.step;
    const double fm = f(std::span<const double>(x), nullptr);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw std::runtime_error("grad_check: non-finite function value");
    const double numeric = (fp - fm) / (2.0 * opt.step);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), opt.floor});
    const double rel = abs_err / denom;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = i;
    }
    rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    ++rep.checked;
  }
  rep.passed = rep.max_rel_error <= opt.tol;
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: 8-byte magic "F4DCKPT1", uint64 LE header length, JSON header, then
// for every parameter in header order its value, Adam m and Adam v as
// little-endian float32 blobs.

inline constexpr char kCheckpointMagic[8] = {'F', '4', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename T>
std::string serialize_checkpoint(const ParamStore<T>& store, const AdamConfig& adam,
                                 const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header;
  header["step"] = store.step();
  header["adam"] = {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
  header["dtype"] = "float32";
  header["endianness"] = "little";
  header["extra"] = extra;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& p : store.params()) {
    entries.push_back({{"name", p.name}, {"shape", {p.value.rows, p.value.cols}}, {"trainable", p.trainable}});
  }
  header["params"] = entries;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 8);
  const uint64_t len = text.size();
  append_le<uint64_t>(out, std::span<const uint64_t>(&len, 1));
  out += text;
  for (const auto& p : store.params()) {
    for (const Matrix<T>* m : {&p.value, &p.adam_m, &p.adam_v}) {
      const auto f = m->template cast<float>();
      append_le<float>(out, f.data);
    }
  }
  return out;
}

struct CheckpointInfo {
  AdamConfig adam;
  nlohmann::json extra;
};

template <typename T>
ParamStore<T> parse_checkpoint(const std::string& bytes, CheckpointInfo* info = nullptr) {
  if (bytes.size() < 16 || bytes.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0) {
    throw std::runtime_error("not a flow4d checkpoint");
  }
  const uint64_t len = parse_le<uint64_t>(bytes.data() + 8, 1)[0];
  if (16 + len > bytes.size()) throw std::runtime_error("truncated checkpoint header");
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  std::size_t pos = 16 + len;
  ParamStore<T> store;
  for (const auto& e : header.at("params")) {
    const auto shape = e.at("shape").get<std::array<std::size_t, 2>>();
    const std::size_t count = shape[0] * shape[1];
    if (pos + 3 * count * sizeof(float) > bytes.size()) throw std::runtime_error("truncated checkpoint data");
    std::array<Matrix<T>, 3> mats;
    for (auto& m : mats) {
      const auto vals = parse_le<float>(bytes.data() + pos, count);
      pos += count * sizeof(float);
      m = Matrix<T>(shape[0], shape[1]);
      for (std::size_t i = 0; i < count; ++i) m.data[i] = static_cast<T>(vals[i]);
    }
    auto& p = store.add(e.at("name").get<std::string>(), std::move(mats[0]), e.at("trainable").get<bool>());
    p.adam_m = std::move(mats[1]);
    p.adam_v = std::move(mats[2]);
  }
  if (pos != bytes.size()) throw std::runtime_error("trailing bytes in checkpoint");
  store.set_step(header.at("step").get<int64_t>());
  if (info) {
    const auto& a = header.at("adam");
    info->adam = {a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
                  a.at("eps").get<double>()};
    info->extra = header.value("extra", nlohmann::json::object());
  }
  return store;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store, const AdamConfig& adam,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  write_file(path, serialize_checkpoint(store, adam, extra));
}

template <typename T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr) {
  return parse_checkpoint<T>(read_file(path), info);
}

}  // namespace flow4d
