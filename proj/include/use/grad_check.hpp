#pragma once

// Central finite-difference verification of graph gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "use/tensor.hpp"

namespace use {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t entries_checked = 0;
};

struct GradCheckOptions {
  double epsilon = 1e-6;
  // |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double floor = 1e-6;
  // Entries checked per input; all entries when <= 0.
  int max_entries_per_input = 0;
  std::uint64_t seed = 0;
};

using LossFn = std::function<Tensor<double>(Graph<double>&, const std::vector<Tensor<double>>&)>;

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// f builds a scalar loss from leaves holding the given inputs. Inputs are
// perturbed in place and restored.
inline GradCheckResult grad_check(const LossFn& f, std::vector<Matrix<double>>& inputs,
                                  const GradCheckOptions& options = {}) {
  std::vector<Matrix<double>> analytic;
  {
    Graph<double> g;
    std::vector<Tensor<double>> leaves;
    for (const auto& m : inputs) leaves.push_back(g.leaf(m, true));
    const Tensor<double> loss = f(g, leaves);
    g.backward(loss);
    for (const auto& l : leaves) analytic.push_back(l.grad());
  }
  auto evaluate = [&] {
    Graph<double> g(false);
    std::vector<Tensor<double>> leaves;
    for (const auto& m : inputs) leaves.push_back(g.leaf(m, false));
    return f(g, leaves).item();
  };
  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Index> entries(static_cast<std::size_t>(inputs[i].size()));
    for (Index e = 0; e < inputs[i].size(); ++e) entries[static_cast<std::size_t>(e)] = e;
    if (options.max_entries_per_input > 0 && entries.size() > static_cast<std::size_t>(options.max_entries_per_input)) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(options.max_entries_per_input));
    }
    for (Index e : entries) {
      double& x = inputs[i].data()[e];
      const double saved = x;
      x = saved + options.epsilon;
      const double up = evaluate();
      x = saved - options.epsilon;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double a = analytic[i].data()[e];
      result.max_relative_error = std::max(result.max_relative_error, relative_error(a, numeric, options.floor));
      result.max_absolute_error = std::max(result.max_absolute_error, std::abs(a - numeric));
      ++result.entries_checked;
    }
  }
  return result;
}

}  // namespace use
