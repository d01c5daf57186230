#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "enat/tensor.hpp"

namespace enat {

/// A parameter tensor together with its checkpoint name.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

/// Linear warmup to `base_rate`, then inverse square-root decay.
/// `warmup_steps == 0` keeps the rate constant.
struct LearningRateSchedule {
  double base_rate = 1e-3;
  std::size_t warmup_steps = 0;

  double rate(std::size_t step) const {
    if (warmup_steps == 0 || step == 0) return base_rate;
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup_steps);
    return base_rate * std::min(s / w, std::sqrt(w / s));
  }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

/// First/second moment accumulators per parameter plus the step counter.
struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
  LearningRateSchedule schedule;
  AdamHyper hyper;
};

/// L2 norm of all gradient entries in `params`.
inline double global_grad_norm(const ParameterList& params) {
  double total = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) total += g * g;
  return std::sqrt(total);
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParameterList& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (double& g : p.tensor.node()->grad) g *= f;
  }
  return norm;
}

/// One Adam update of `params` using their accumulated gradients.
/// Parameters without a gradient buffer are treated as having zero gradient.
inline void adam_step(ParameterList& params, OptimizerState& state) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.tensor.size(), 0.0);
      state.second_moment.emplace_back(p.tensor.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " +
                        std::to_string(state.first_moment.size()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].tensor.size())
      throw ShapeError("adam_step: moment shape mismatch for " + params[i].name);
    if (params[i].tensor.has_grad())
      for (double g : params[i].tensor.grad())
        if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + params[i].name);
  }
  ++state.step;
  const auto& h = state.hyper;
  const double lr = state.schedule.rate(state.step);
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto values = p.mutable_values();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      values[k] -= lr * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
  }
}

inline void zero_grads(ParameterList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace enat
