#pragma once

// Central finite-difference gradient verification. Uses only forward
// evaluations, so it stays independent of the reverse-mode path it checks.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "gsh/tensor.hpp"

namespace gsh {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)
/// over the given entries of x. f must be deterministic (dropout in infer
/// mode) and is re-evaluated 2 times per checked entry.
inline double finite_difference_gradcheck_at(
    const ScalarFn& f, const Tensor& x, const std::vector<std::size_t>& entries,
    double step = 1e-5) {
  Tensor out = f(x);
  if (out.size() != 1)
    throw ValidationError("gradcheck: f must return a scalar");
  GradientMap grads = backward(out);
  const std::vector<double>* analytic = nullptr;
  std::vector<double> zeros;
  if (grads.contains(x)) {
    analytic = &grads.at(x);
  } else {
    zeros.assign(x.size(), 0.0);  // root independent of x
    analytic = &zeros;
  }

  auto& xd = x.leaf_data();
  double worst = 0.0;
  for (std::size_t i : entries) {
    const double orig = xd[i];
    xd[i] = orig + step;
    const double fp = f(x).data()[0];
    xd[i] = orig - step;
    const double fm = f(x).data()[0];
    xd[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = (*analytic)[i];
    const double denom =
        std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

/// Checks every entry of x.
inline double finite_difference_gradcheck(const ScalarFn& f, const Tensor& x,
                                          double step = 1e-5) {
  std::vector<std::size_t> entries(x.size());
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
  return finite_difference_gradcheck_at(f, x, entries, step);
}

}  // namespace gsh
