#include "mmtl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mmtl {

AdamState AdamState::init(std::span<const Tensor> params, double lr,
                          double beta1, double beta2, double eps) {
  AdamState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, AdamState& state, double weight_decay) {
  if (params.size() != state.m.size())
    throw std::invalid_argument("adam_step: state was built for a different parameter list");
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    auto grad = params[pi].grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    if (m.size() != data.size())
      throw std::invalid_argument("adam_step: parameter shape changed");
    if (grad.empty()) {
      // Parameter untouched by backward: moments decay, update is zero.
      for (size_t i = 0; i < m.size(); ++i) {
        m[i] *= state.beta1;
        v[i] *= state.beta2;
      }
      continue;
    }
    for (size_t i = 0; i < data.size(); ++i) {
      double g = grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      data[i] -= state.lr * (mhat / (std::sqrt(vhat) + state.eps) + weight_decay * data[i]);
    }
  }
}

}  // namespace mmtl
