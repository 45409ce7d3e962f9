#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "sliceprof/errors.hpp"
#include "sliceprof/tensor.hpp"

namespace sliceprof {

/// Per-parameter Adam accumulators.
struct AdamState {
  std::vector<double> m;  ///< first moment, same layout as the parameter
  std::vector<double> v;  ///< second moment, elementwise >= 0
  std::int64_t t = 0;     ///< completed steps

  static AdamState for_param(const Tensor& param) {
    AdamState s;
    s.m.assign(param.numel(), 0.0);
    s.v.assign(param.numel(), 0.0);
    return s;
  }
};

/// One Adam update with bias correction. Weight decay enters as an L2 term
/// added to the gradient before the moment updates.
inline Tensor adam_step(const Tensor& param, const Tensor& grad, AdamState& state, double lr,
                        double beta1, double beta2, double eps, double weight_decay) {
  if (param.shape() != grad.shape()) {
    throw shape_error("adam_step: parameter " + detail::shape_str(param.shape()) +
                      " vs gradient " + detail::shape_str(grad.shape()));
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw value_error("adam_step: betas must be in [0,1)");
  }
  if (state.m.size() != param.numel()) state = AdamState::for_param(param);

  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  std::vector<double> out(param.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = grad.values()[i] + weight_decay * param.values()[i];
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    out[i] = param.values()[i] - lr * mhat / (std::sqrt(vhat) + eps);
  }
  return Tensor(param.shape(), std::move(out), param.requires_grad());
}

/// Scales all gradients by max_norm / ||g||_2 when the global norm exceeds
/// max_norm; otherwise returns them unchanged.
inline std::vector<Tensor> clip_grad_norm(std::vector<Tensor> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw value_error("clip_grad_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return grads;
  const double factor = max_norm / norm;
  for (Tensor& g : grads) {
    std::vector<double> scaled(g.numel());
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = g.values()[i] * factor;
    g = Tensor(g.shape(), std::move(scaled), false);
  }
  return grads;
}

}  // namespace sliceprof
