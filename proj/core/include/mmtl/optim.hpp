#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmtl/tensor.hpp"

namespace mmtl {

/// Adam moment buffers for a fixed parameter list. Buffers are positional:
/// the same tensors must be passed to every adam_step call, in order.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState init(std::span<const Tensor> params, double lr,
                        double beta1 = 0.9, double beta2 = 0.999,
                        double eps = 1e-8);
};

/// Bias-corrected Adam update from each parameter's accumulated grad.
/// weight_decay is decoupled (AdamW). Gradients are left untouched.
void adam_step(std::span<Tensor> params, AdamState& state,
               double weight_decay = 0.0);

}  // namespace mmtl
