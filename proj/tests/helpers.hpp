// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dig/autodiff.hpp"

namespace dig::testing {

struct ParamCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double ad = 0.0, fd = 0.0;
  bool pass(double tol) const { return max_rel_err < tol; }
};

/// Finite-difference check of every element of every named parameter against
/// one reverse-mode pass. `ad_grads` must align with `params`; `raw_loss`
/// re-evaluates the scalar loss from the current parameter values.
/// `stride` > 1 subsamples elements for speed.
inline ParamCheckResult check_param_grads(const std::vector<std::pair<std::string, Tensor*>>& params,
                                          const std::vector<Tensor>& ad_grads,
                                          const std::function<double()>& raw_loss, double h = 1e-5,
                                          double denom_floor = 1e-2, std::int64_t stride = 1) {
  ParamCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* slot = params[pi].second;
    Tensor original = *slot;
    for (std::int64_t j = 0; j < original.numel(); j += stride) {
      Tensor plus = original.clone();
      plus.mutable_data()[j] += h;
      *slot = plus;
      double fp = raw_loss();
      Tensor minus = original.clone();
      minus.mutable_data()[j] -= h;
      *slot = minus;
      double fm = raw_loss();
      *slot = original;
      double fd = (fp - fm) / (2.0 * h);
      double a = ad_grads[pi].at(j);
      double rel = std::abs(a - fd) / std::max({denom_floor, std::abs(a), std::abs(fd)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = params[pi].first;
        res.worst_index = j;
        res.ad = a;
        res.fd = fd;
      }
    }
  }
  return res;
}

}  // namespace dig::testing
