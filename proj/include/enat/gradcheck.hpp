#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "enat/tensor.hpp"

namespace enat {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "input[i][j]: analytic vs numeric"
};

/// Central-difference check of d f / d inputs. `f` must build a scalar from
/// the current values of `inputs` (which must require grad). At most
/// `max_coordinates` coordinates per input are sampled with `seed`.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult check_gradients(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                                       double h = 1e-5, std::size_t max_coordinates = 64, std::uint64_t seed = 0,
                                       double floor = 1e-6) {
  for (const auto& t : inputs)
    if (!t.requires_grad()) throw ContractError("check_gradients: inputs must require grad");
  for (auto t : inputs) t.zero_grad();
  Tape::active().clear();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto t : inputs) {
    const auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    t.zero_grad();
  }
  GradCheckResult result;
  std::mt19937_64 rng(seed);
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor t = inputs[k];
    std::vector<std::size_t> coords(t.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coordinates);
    }
    auto values = t.mutable_values();
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.coordinates;
      if (!(err <= result.max_relative_error)) {
        result.max_relative_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        result.worst = "input[" + std::to_string(k) + "][" + std::to_string(i) + "]: " + std::to_string(a) + " vs " +
                       std::to_string(numeric);
      }
    }
  }
  return result;
}

}  // namespace enat
