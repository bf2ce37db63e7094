#pragma once

#include "rnn_dynamo/common.hpp"

#include <cmath>

namespace rnn_dynamo {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

/// Bias-corrected Adam update of one tensor. `step` is the 1-based update
/// count shared by all tensors of a model.
template <class W, class M, class V, class G>
void adam_update(W&& w, M&& m, V&& v, const G& g, long step, double lr, const AdamConfig& cfg) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
}

}  // namespace rnn_dynamo
