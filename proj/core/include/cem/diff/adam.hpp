#pragma once

#include "cem/diff/tensor.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace cem::diff {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;  // number of updates applied so far

  static AdamState zeros_like(std::span<const Tensor> params);
  bool operator==(const AdamState&) const = default;
};

struct AdamResult {
  std::vector<Tensor> params;
  AdamState state;
};

// One bias-corrected Adam step. Throws NonFiniteError (inputs untouched) if any
// gradient element is NaN or infinite.
AdamResult adam_update(std::span<const Tensor> params, std::span<const Tensor> grads,
                       const AdamState& state, const AdamConfig& cfg = {});

// Scales grads in place so their global L2 norm is at most max_norm; returns the norm
// before clipping.
double clip_global_norm(std::span<Tensor> grads, double max_norm);

}  // namespace cem::diff
