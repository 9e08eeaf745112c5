#pragma once

// Central finite-difference oracle for reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "cmrlm/rng.hpp"
#include "cmrlm/tensor.hpp"

namespace cmrlm::testing {

struct GradReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double max_abs_numeric = 0.0;
  std::size_t checked = 0;
};

namespace detail {

inline GradReport summarize(const std::vector<std::pair<double, double>>& entries, double floor_frac) {
  GradReport r;
  for (const auto& e : entries) r.max_abs_numeric = std::max(r.max_abs_numeric, std::abs(e.second));
  const double floor = std::max(floor_frac * r.max_abs_numeric, 1e-30);
  for (const auto& [analytic, numeric] : entries) {
    const double err = std::abs(analytic - numeric);
    r.max_abs_error = std::max(r.max_abs_error, err);
    r.max_rel_error = std::max(r.max_rel_error, err / std::max({std::abs(analytic), std::abs(numeric), floor}));
  }
  r.checked = entries.size();
  return r;
}

}  // namespace detail

template <class T>
using LossFn = std::function<Var<T>(Graph<T>&)>;

template <class T>
double evaluate(const LossFn<T>& loss) {
  Graph<T> g(false);
  return static_cast<double>(loss(g).value()[0]);
}

// Elementwise |a - n| / max(|a|, |n|, floor) where floor = floor_frac * max|n| over
// all checked entries, so entries whose true gradient is ~0 are judged against the
// gradient scale of the whole check rather than against themselves.
//
// Compares the analytic gradient of every entry of `params` with central
// differences of step `h`. At most `max_entries` entries per tensor are
// probed (evenly strided) to keep large checks fast.
template <class T>
GradReport check_gradients(const std::vector<Tensor<T>*>& params, const LossFn<T>& loss, double h,
                           double floor_frac = 1e-3, std::size_t max_entries = 0) {
  for (Tensor<T>* p : params) {
    p->set_requires_grad(true);
    p->zero_grad();
  }
  {
    Graph<T> g;
    Var<T> l = loss(g);
    g.backward(l);
  }
  std::vector<std::pair<double, double>> entries;
  for (Tensor<T>* p : params) {
    const std::vector<T> analytic(p->grad().begin(), p->grad().end());
    const std::size_t n = p->size();
    const std::size_t step = (max_entries == 0 || n <= max_entries) ? 1 : (n + max_entries - 1) / max_entries;
    for (std::size_t i = 0; i < n; i += step) {
      const T saved = (*p)[i];
      (*p)[i] = static_cast<T>(saved + h);
      const double up = evaluate(loss);
      (*p)[i] = static_cast<T>(saved - h);
      const double down = evaluate(loss);
      (*p)[i] = saved;
      entries.emplace_back(static_cast<double>(analytic[i]), (up - down) / (2.0 * h));
    }
  }
  return detail::summarize(entries, floor_frac);
}

// 32-bit analytic gradients against a 64-bit central-difference oracle taken at
// the same (float-representable) parameter values. `build` is a generic callable
// (Graph<U>&, std::vector<Tensor<U>>& params) -> Var<U> instantiated for both
// float and double.
template <class Build>
GradReport check_gradients_f32(std::vector<Tensor<float>>& params, Build build, double h, double floor_frac = 1e-3,
                               std::size_t max_entries = 0) {
  std::vector<std::vector<float>> analytic;
  {
    for (auto& p : params) {
      p.set_requires_grad(true);
      p.zero_grad();
    }
    Graph<float> g;
    g.backward(build(g, params));
    for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  }
  std::vector<Tensor<double>> wide;
  for (const auto& p : params) wide.push_back(p.cast<double>());
  auto eval = [&] {
    Graph<double> g(false);
    return build(g, wide).value()[0];
  };
  std::vector<std::pair<double, double>> entries;
  for (std::size_t k = 0; k < wide.size(); ++k) {
    const std::size_t n = wide[k].size();
    const std::size_t step = (max_entries == 0 || n <= max_entries) ? 1 : (n + max_entries - 1) / max_entries;
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = wide[k][i];
      wide[k][i] = saved + h;
      const double up = eval();
      wide[k][i] = saved - h;
      const double down = eval();
      wide[k][i] = saved;
      entries.emplace_back(analytic[k][i], (up - down) / (2.0 * h));
    }
  }
  return detail::summarize(entries, floor_frac);
}

// Precomputed 32-bit analytic gradients against central differences of a 64-bit
// loss over `wide`, whose tensors line up one-to-one with `analytic`.
inline GradReport check_against_wide(const std::vector<std::vector<float>>& analytic,
                                     const std::vector<Tensor<double>*>& wide, const LossFn<double>& loss, double h,
                                     double floor_frac = 1e-3, std::size_t max_entries = 0) {
  std::vector<std::pair<double, double>> entries;
  for (std::size_t k = 0; k < wide.size(); ++k) {
    Tensor<double>& p = *wide[k];
    const std::size_t n = p.size();
    const std::size_t step = (max_entries == 0 || n <= max_entries) ? 1 : (n + max_entries - 1) / max_entries;
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = p[i];
      p[i] = saved + h;
      const double up = evaluate(loss);
      p[i] = saved - h;
      const double down = evaluate(loss);
      p[i] = saved;
      entries.emplace_back(analytic[k][i], (up - down) / (2.0 * h));
    }
  }
  return detail::summarize(entries, floor_frac);
}

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace cmrlm::testing
