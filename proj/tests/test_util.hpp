#pragma once

// Helpers shared by the test binaries.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "flow4d/autodiff.hpp"
#include "flow4d/sparse.hpp"

namespace testutil {

using flow4d::GradCheckOptions;
using flow4d::GradCheckReport;
using flow4d::KinkFreeze;
using flow4d::Matrix;
using flow4d::ParamStore;
using flow4d::Tape;
using flow4d::Var;

template <typename T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<T> m(rows, cols);
  for (auto& v : m.data) v = static_cast<T>(u(rng));
  return m;
}

/// Random sparse site set with roughly `occupancy` of the grid active.
inline std::shared_ptr<const flow4d::CoordSet> random_sites(flow4d::Coord4 dims, double occupancy, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(occupancy);
  std::vector<flow4d::Coord4> coords;
  for (int t = 0; t < dims[3]; ++t)
    for (int h = 0; h < dims[2]; ++h)
      for (int l = 0; l < dims[1]; ++l)
        for (int w = 0; w < dims[0]; ++w)
          if (keep(rng)) coords.push_back({w, l, h, t});
  if (coords.empty()) coords.push_back({0, 0, 0, 0});
  return flow4d::CoordSet::make(std::move(coords), dims);
}

/// Scalar loss with fixed random weights, so gradients are not all equal.
template <typename T>
Var weighted_loss(Tape<T>& tape, Var y, uint64_t seed = 99) {
  const Matrix<T>& v = tape.value(y);
  return flow4d::ops::weighted_sum(tape, y, random_matrix<T>(v.rows, v.cols, seed));
}

/// Finite-difference check of d(loss)/d(param `name`). ReLU masks are frozen
/// after the first (analytic) evaluation so differences never cross a kink.
inline GradCheckReport check_param(ParamStore<double>& store, const std::string& name,
                                   const std::function<Var(Tape<double>&)>& build, GradCheckOptions opt = {},
                                   bool freeze_kinks = true) {
  KinkFreeze kf;
  auto& p = store.at(name);
  auto f = [&](std::span<const double> x, std::vector<double>* grad) {
    std::copy(x.begin(), x.end(), p.value.data.begin());
    Tape<double> tape;
    if (freeze_kinks) {
      kf.cursor = 0;
      tape.kink_freeze = &kf;
    }
    const Var loss = build(tape);
    const double v = tape.value(loss)(0, 0);
    if (grad) {
      store.zero_grad();
      tape.backward(loss);
      std::copy(p.grad.data.begin(), p.grad.data.end(), grad->begin());
      kf.replay = true;
    }
    return v;
  };
  const std::vector<double> x0 = p.value.data;
  auto rep = flow4d::grad_check(f, x0, opt);
  p.value.data = x0;
  return rep;
}

/// Finite-difference check of d(loss)/d(input), the input being a tape leaf.
inline GradCheckReport check_input(const Matrix<double>& x0, const std::function<Var(Tape<double>&, Var)>& build,
                                   GradCheckOptions opt = {}, bool freeze_kinks = true) {
  KinkFreeze kf;
  auto f = [&](std::span<const double> x, std::vector<double>* grad) {
    Matrix<double> m(x0.rows, x0.cols);
    std::copy(x.begin(), x.end(), m.data.begin());
    Tape<double> tape;
    if (freeze_kinks) {
      kf.cursor = 0;
      tape.kink_freeze = &kf;
    }
    const Var in = tape.input(std::move(m));
    const Var loss = build(tape, in);
    const double v = tape.value(loss)(0, 0);
    if (grad) {
      tape.backward(loss);
      const auto& g = tape.grad(in);
      std::copy(g.data.begin(), g.data.end(), grad->begin());
      kf.replay = true;
    }
    return v;
  };
  return flow4d::grad_check(f, x0.data, opt);
}

/// Biases of layers followed by batch norm. Their exact gradient is zero (BN
/// removes any per-channel shift), so relative error only measures roundoff.
inline bool feeds_batch_norm(const std::string& name) {
  return name.ends_with(".bias") && !name.ends_with("proj.bias") && !name.starts_with("head.");
}

/// Checks a parameter, comparing BN-fed biases on an absolute scale.
inline bool param_ok(const GradCheckReport& r, const std::string& name, double abs_tol = 1e-6) {
  return feeds_batch_norm(name) ? r.max_abs_error <= abs_tol : r.passed;
}

inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, d);
  }
  return worst;
}

}  // namespace testutil
