#include "neuroflip/hard_concrete.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <utility>

namespace neuroflip::hard_concrete {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double rectify(const HardConcreteParams& p, double s) {
  const double stretched = s * (p.upper - p.lower) + p.lower;
  return std::min(std::max(stretched, 0.0), kUpperCap);
}

// Noise logits for discretization, shared across calls with the same seed
// and sample count.
const std::vector<double>& cached_noise(std::size_t samples, std::uint64_t seed) {
  static std::mutex mutex;
  static std::map<std::pair<std::size_t, std::uint64_t>, std::vector<double>> cache;
  const std::lock_guard lock(mutex);
  auto [it, inserted] = cache.try_emplace({samples, seed});
  if (inserted) {
    Rng rng(seed);
    it->second.resize(samples);
    for (auto& v : it->second) {
      const double u = rng.uniform_open();
      v = std::log(u) - std::log1p(-u);
    }
  }
  return it->second;
}

}  // namespace

HardConcreteParams HardConcreteParams::with_prob_nonzero(std::size_t units, double p, double temperature, double lower,
                                                         double upper) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("with_prob_nonzero: p must lie in (0, 1)");
  HardConcreteParams params;
  params.temperature = temperature;
  params.lower = lower;
  params.upper = upper;
  params.validate();
  const double logit_p = std::log(p) - std::log1p(-p);
  params.gamma.assign(units, zero_crossing_logit(params) + logit_p);
  return params;
}

void HardConcreteParams::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("hard concrete: temperature must be positive");
  }
  if (!(lower <= 0.0) || !(upper >= 1.0) || !std::isfinite(lower) || !std::isfinite(upper)) {
    throw std::invalid_argument("hard concrete: stretch bounds must satisfy l <= 0 and r >= 1");
  }
  if (lower == 0.0) throw std::invalid_argument("hard concrete: l = 0 leaves no mass at zero");
  for (double g : gamma) {
    if (!std::isfinite(g)) throw std::invalid_argument("hard concrete: non-finite location logit");
  }
}

double zero_crossing_logit(const HardConcreteParams& params) {
  return params.temperature * std::log(-params.lower / params.upper);
}

double cap_crossing_logit(const HardConcreteParams& params) {
  return params.temperature * std::log((kUpperCap - params.lower) / (params.upper - kUpperCap));
}

MaskSample sample(const HardConcreteParams& params, Rng& rng) {
  std::vector<double> u(params.size());
  for (auto& v : u) v = rng.uniform_open();
  return sample_from_noise(params, std::move(u));
}

MaskSample sample_from_noise(const HardConcreteParams& params, std::vector<double> u) {
  params.validate();
  if (u.size() != params.size()) throw std::invalid_argument("sample: noise length differs from unit count");
  MaskSample out;
  out.s.resize(u.size());
  out.z.resize(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (!(u[j] > 0.0 && u[j] < 1.0)) throw std::invalid_argument("sample: noise must lie strictly inside (0, 1)");
    const double logit_u = std::log(u[j]) - std::log1p(-u[j]);
    out.s[j] = sigmoid((logit_u + params.gamma[j]) / params.temperature);
    out.z[j] = rectify(params, out.s[j]);
  }
  out.u = std::move(u);
  return out;
}

std::vector<double> prob_nonzero(const HardConcreteParams& params) {
  params.validate();
  const double offset = zero_crossing_logit(params);
  std::vector<double> p(params.size());
  for (std::size_t j = 0; j < p.size(); ++j) p[j] = sigmoid(params.gamma[j] - offset);
  return p;
}

std::vector<double> prob_one(const HardConcreteParams& params) {
  params.validate();
  const double offset = cap_crossing_logit(params);
  std::vector<double> p(params.size());
  for (std::size_t j = 0; j < p.size(); ++j) p[j] = sigmoid(params.gamma[j] - offset);
  return p;
}

double expected_c0(const HardConcreteParams& params) {
  double total = 0.0;
  for (double p : prob_nonzero(params)) total += p;
  return total;
}

double interior_mass(const HardConcreteParams& params) {
  const auto nonzero = prob_nonzero(params);
  const auto one = prob_one(params);
  double total = 0.0;
  for (std::size_t j = 0; j < nonzero.size(); ++j) total += std::max(0.0, nonzero[j] - one[j]);
  return total;
}

std::vector<double> expected_value(const HardConcreteParams& params, std::size_t samples, std::uint64_t seed) {
  params.validate();
  if (samples == 0) throw std::invalid_argument("expected_value: need at least one sample");
  const auto& noise = cached_noise(samples, seed);
  std::vector<double> mean(params.size(), 0.0);
  for (std::size_t j = 0; j < params.size(); ++j) {
    double total = 0.0;
    for (double logit_u : noise) total += rectify(params, sigmoid((logit_u + params.gamma[j]) / params.temperature));
    mean[j] = total / static_cast<double>(samples);
  }
  return mean;
}

std::vector<int> discretize(const HardConcreteParams& params, std::size_t samples, std::uint64_t seed) {
  const auto mean = expected_value(params, samples, seed);
  std::vector<int> mask(mean.size());
  for (std::size_t j = 0; j < mean.size(); ++j) mask[j] = mean[j] > 0.5 ? 1 : 0;
  return mask;
}

autodiff::NodeId graph_sample(autodiff::Graph& graph, autodiff::NodeId gamma, autodiff::NodeId noise_logit,
                              const HardConcreteParams& params) {
  params.validate();
  auto s = graph.sigmoid(graph.scale(graph.add(noise_logit, gamma), 1.0 / params.temperature));
  auto stretched = graph.add_scalar(graph.scale(s, params.upper - params.lower), params.lower);
  return graph.clamp(stretched, 0.0, kUpperCap);
}

autodiff::NodeId graph_expected_c0(autodiff::Graph& graph, autodiff::NodeId gamma, const HardConcreteParams& params) {
  params.validate();
  return graph.sum(graph.sigmoid(graph.add_scalar(gamma, -zero_crossing_logit(params))));
}

autodiff::NodeId graph_interior_mass(autodiff::Graph& graph, autodiff::NodeId gamma,
                                     const HardConcreteParams& params) {
  params.validate();
  auto nonzero = graph.sigmoid(graph.add_scalar(gamma, -zero_crossing_logit(params)));
  auto one = graph.sigmoid(graph.add_scalar(gamma, -cap_crossing_logit(params)));
  return graph.sum(graph.sub(nonzero, one));
}

std::vector<double> noise_logits(std::span<const double> u) {
  std::vector<double> out(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) out[j] = std::log(u[j]) - std::log1p(-u[j]);
  return out;
}

}  // namespace neuroflip::hard_concrete
