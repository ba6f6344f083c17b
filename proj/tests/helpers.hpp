#pragma once

#include <cstdint>
#include <vector>

#include "gsh/rng.hpp"
#include "gsh/tensor.hpp"

namespace gsh_test {

/// Uniform values in [lo, hi), reproducible per key.
inline gsh::Tensor random_tensor(gsh::Shape shape, std::uint64_t key,
                                 bool requires_grad = false, double lo = -1.0,
                                 double hi = 1.0) {
  gsh::CounterRng rng(gsh::mix64(key));
  std::vector<double> d(gsh::numel(shape));
  for (double& v : d) v = rng.uniform(lo, hi);
  return gsh::Tensor::from(std::move(shape), std::move(d), requires_grad);
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace gsh_test
