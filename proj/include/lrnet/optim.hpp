#pragma once

#include <cmath>
#include <string>

#include "lrnet/network.hpp"

namespace lrnet {

inline bool is_bias(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

/// SGD with momentum and L2 weight decay. Velocity buffers are created
/// lazily, so parameters added later (feedback heads) start at zero velocity.
template <typename Real>
struct OptimState {
  ParameterSet<Real> velocity;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool decay_biases = false;
};

/// v <- momentum*v - lr*(g + decay*w);  w <- w + v.  Decay is skipped for
/// biases unless decay_biases is set.
template <typename Real>
void sgd_step(ParameterSet<Real>& params, const ParameterSet<Real>& grads,
              OptimState<Real>& state) {
  if (grads.size() != params.size())
    fail(ErrorKind::kShape, "sgd: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  for (const auto& [name, g] : grads) {
    check_finite(g, "sgd gradient '" + name + "'");
    if (params.at(name).shape() != g.shape())
      fail(ErrorKind::kShape, "sgd: gradient '" + name + "' shape mismatch");
  }
  const Real lr = static_cast<Real>(state.learning_rate);
  const Real mu = static_cast<Real>(state.momentum);
  for (auto& [name, w] : params) {
    const Tensor<Real>& g = grads.at(name);
    if (!state.velocity.contains(name)) state.velocity.add(name, Tensor<Real>(w.shape()));
    Tensor<Real>& v = state.velocity.at(name);
    if (v.shape() != w.shape())
      fail(ErrorKind::kShape, "sgd: momentum buffer '" + name + "' shape mismatch");
    const Real decay =
        (is_bias(name) && !state.decay_biases) ? Real(0) : static_cast<Real>(state.weight_decay);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] - lr * (g[i] + decay * w[i]);
      w[i] += v[i];
    }
  }
}

}  // namespace lrnet
