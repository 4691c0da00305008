#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "hysparse/rng.hpp"
#include "hysparse/tensor.hpp"

namespace testutil {

using hysparse::Rng;
using hysparse::Shape;
using hysparse::Tensor;

inline Tensor randn(Rng& rng, Shape shape, double sd = 1.0, bool grad = false) {
  std::vector<double> v(hysparse::numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  Tensor t(std::move(shape), std::move(v));
  if (grad) t.set_requires_grad();
  return t;
}

inline std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Central differences for every entry of `x`, compared with the gradient
// backward() leaves in x. Returns ||analytic - numeric|| / max(norms).
inline double fd_relative_error(const std::function<Tensor()>& loss, Tensor x, double h = 1e-5) {
  x.zero_grad();
  loss().backward();
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  x.zero_grad();
  hysparse::NoGradGuard guard;
  auto w = x.data();
  double d2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + h;
    const double up = loss().item();
    w[i] = orig - h;
    const double down = loss().item();
    w[i] = orig;
    const double num = (up - down) / (2 * h);
    d2 += (analytic[i] - num) * (analytic[i] - num);
    a2 += analytic[i] * analytic[i];
    n2 += num * num;
  }
  if (d2 == 0.0) return 0.0;
  return std::sqrt(d2) / std::sqrt(std::max(a2, n2));
}

}  // namespace testutil
