#pragma once

// Hard Concrete mask distribution: a Binary Concrete variable stretched to
// (l, r) and rectified into [0, 1). Values below 0 collapse onto an exact
// zero; the top is capped just under 1 so only a true zero leaves a unit
// untouched and only the discretized mask reaches exactly one.

#include "neuroflip/autodiff.hpp"
#include "neuroflip/random.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace neuroflip::hard_concrete {

inline constexpr double kUpperCap = 1.0 - 0x1p-20;
inline constexpr double kDefaultTemperature = 0.5;
inline constexpr double kDefaultLower = -0.1;
inline constexpr double kDefaultUpper = 1.1;
inline constexpr std::size_t kDiscretizeSamples = 10000;
inline constexpr std::uint64_t kDiscretizeSeed = 0x5eedf00dULL;

struct HardConcreteParams {
  std::vector<double> gamma;  // location logits, one per unit
  double temperature = kDefaultTemperature;
  double lower = kDefaultLower;
  double upper = kDefaultUpper;

  /// Every unit starts at the same logit, chosen so P(z != 0) = p.
  static HardConcreteParams with_prob_nonzero(std::size_t units, double p = 0.5, double temperature = kDefaultTemperature,
                                              double lower = kDefaultLower, double upper = kDefaultUpper);

  std::size_t size() const { return gamma.size(); }
  /// Throws std::invalid_argument unless tau > 0 and l <= 0 < 1 <= r.
  void validate() const;
};

/// Logit offset at which P(z != 0) = 1/2: tau * log(-l / r).
double zero_crossing_logit(const HardConcreteParams& params);
/// Logit offset at which P(z >= cap) = 1/2.
double cap_crossing_logit(const HardConcreteParams& params);

struct MaskSample {
  std::vector<double> u;
  std::vector<double> s;  // Binary Concrete value before the stretch
  std::vector<double> z;
};

MaskSample sample(const HardConcreteParams& params, Rng& rng);
/// Deterministic in (u, params). Each u must lie in (0, 1).
MaskSample sample_from_noise(const HardConcreteParams& params, std::vector<double> u);

std::vector<double> prob_nonzero(const HardConcreteParams& params);
/// P(z reaches the cap), i.e. the upper point mass.
std::vector<double> prob_one(const HardConcreteParams& params);
double expected_c0(const HardConcreteParams& params);
double interior_mass(const HardConcreteParams& params);

/// Monte Carlo E[z_j] with a fixed noise sequence shared by all units.
std::vector<double> expected_value(const HardConcreteParams& params, std::size_t samples = kDiscretizeSamples,
                                   std::uint64_t seed = kDiscretizeSeed);

/// m_j = 1 iff E[z_j] > 0.5.
std::vector<int> discretize(const HardConcreteParams& params, std::size_t samples = kDiscretizeSamples,
                            std::uint64_t seed = kDiscretizeSeed);

// --- Graph builders -----------------------------------------------------------
// `gamma` is a [k] node; `noise_logit` holds log u - log(1 - u) with shape
// [k] or [B, k].

autodiff::NodeId graph_sample(autodiff::Graph& graph, autodiff::NodeId gamma, autodiff::NodeId noise_logit,
                              const HardConcreteParams& params);
autodiff::NodeId graph_expected_c0(autodiff::Graph& graph, autodiff::NodeId gamma, const HardConcreteParams& params);
autodiff::NodeId graph_interior_mass(autodiff::Graph& graph, autodiff::NodeId gamma, const HardConcreteParams& params);

/// log u - log(1 - u), elementwise.
std::vector<double> noise_logits(std::span<const double> u);

}  // namespace neuroflip::hard_concrete
