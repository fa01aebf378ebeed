#pragma once

// Test-side central differences for autodiff graphs.

#include "neuroflip/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>

namespace gradcheck {

using namespace neuroflip::autodiff;

using Bindings = std::map<std::string, RealArray>;

inline Inputs bind_all(const Bindings& b) {
  Inputs in;
  for (const auto& [name, value] : b) in.bind(name, value);
  return in;
}

inline double scalar_output(const Graph& g, NodeId out, const Bindings& b) {
  return evaluate(g, bind_all(b)).value(out).item();
}

// Max relative error of the analytic gradient against a test-side central
// difference, over every coordinate of `name`.
inline double max_relative_error(const Graph& g, NodeId out, Bindings b, const std::string& name, double eps = 1e-6) {
  const Evaluation ev = evaluate(g, bind_all(b));
  const Gradients grads = backpropagate(g, ev, out, {name});
  const RealArray analytic = grads[name];
  double worst = 0.0;
  for (std::size_t j = 0; j < b.at(name).size(); ++j) {
    const double x0 = b.at(name)[j];
    b.at(name)[j] = x0 + eps;
    const double up = scalar_output(g, out, b);
    b.at(name)[j] = x0 - eps;
    const double down = scalar_output(g, out, b);
    b.at(name)[j] = x0;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[j] - numeric) / (std::abs(analytic[j]) + 1e-6));
  }
  return worst;
}

inline RealArray random_array(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return RealArray(std::move(shape), std::move(v));
}

// Weighted sum so every output coordinate contributes a distinct gradient.
inline NodeId weighted_sum(Graph& g, NodeId x, std::mt19937_64& rng) {
  const RealArray w = random_array(g.shape(x), rng, 0.5, 1.5);
  return g.sum(g.mul(x, g.constant(w)));
}

}  // namespace gradcheck
