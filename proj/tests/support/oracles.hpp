#pragma once

// Test-side oracles. These deliberately avoid the library's computational
// paths: finite differences for gradients, a fully half-rounded softmax as
// the naive narrow-storage reference, and tiny statistics helpers.

#include <cmath>
#include <functional>
#include <vector>

#include "glmlab/tensor.hpp"

namespace oracles {

// Central finite difference of a scalar-valued forward around one parameter
// entry. The forward is re-run with the entry displaced by +-eps.
inline glmlab::Real central_difference(glmlab::Tensor param, glmlab::Index flat_index,
                                       const std::function<glmlab::Real()>& forward,
                                       glmlab::Real eps = 1e-5) {
  const glmlab::Real saved = param.values()[flat_index];
  param.values()[flat_index] = saved + eps;
  const glmlab::Real up = forward();
  param.values()[flat_index] = saved - eps;
  const glmlab::Real down = forward();
  param.values()[flat_index] = saved;
  return (up - down) / (2.0 * eps);
}

// Softmax with every intermediate stored in emulated binary16: the narrow
// reference path that overflows where the wide-accumulation contract does not.
inline std::vector<glmlab::Real> softmax_half_reference(const std::vector<glmlab::Real>& row) {
  using glmlab::half_round_value;
  std::vector<glmlab::Real> stored(row.size());
  glmlab::Real maxv = -std::numeric_limits<glmlab::Real>::infinity();
  for (size_t i = 0; i < row.size(); ++i) {
    stored[i] = half_round_value(row[i]);
    maxv = std::max(maxv, stored[i]);
  }
  std::vector<glmlab::Real> exps(row.size());
  glmlab::Real total = 0.0;
  for (size_t i = 0; i < row.size(); ++i) {
    exps[i] = half_round_value(std::exp(half_round_value(stored[i] - maxv)));
    total = half_round_value(total + exps[i]);
  }
  std::vector<glmlab::Real> out(row.size());
  for (size_t i = 0; i < row.size(); ++i) out[i] = half_round_value(exps[i] / total);
  return out;
}

// The denominator floor reflects the oracle's own resolution: central
// differences at eps 1e-5 in wide precision carry cancellation noise around
// 1e-11, so gradients below 1e-6 are compared on an absolute scale.
inline glmlab::Real relative_error(glmlab::Real got, glmlab::Real want) {
  const glmlab::Real scale = std::max({std::fabs(got), std::fabs(want), 1e-6});
  return std::fabs(got - want) / scale;
}

inline glmlab::Real mean(const std::vector<glmlab::Real>& xs) {
  glmlab::Real s = 0.0;
  for (glmlab::Real x : xs) s += x;
  return s / static_cast<glmlab::Real>(xs.size());
}

}  // namespace oracles
