#pragma once

// Hidden-state substitution h -> (1 - m) * h + m * b on the concatenated
// hidden vector of a frozen language model.

#include "neuroflip/hard_concrete.hpp"
#include "neuroflip/lstm_lm.hpp"

#include <span>
#include <string>
#include <vector>

namespace neuroflip::intervention {

/// Added to probabilities before division or logarithms.
inline constexpr double kProbabilityFloor = 1e-9;

/// KL(p || q) with the probability floor on both sides.
double kl_divergence(std::span<const double> p, std::span<const double> q);

enum class Mode { kSingleStep, kEveryStep };

std::string to_string(Mode mode);
/// Accepts "single" and "every".
Mode mode_from_string(const std::string& name);

/// Throws std::invalid_argument on length mismatch.
std::vector<double> apply_mask(std::span<const double> h, std::span<const double> m, std::span<const double> b);

/// Whether 1-based `step` is altered for an instance with intervention
/// position i and target position n.
bool intervenes_at(Mode mode, std::size_t step, std::size_t i, std::size_t n);

struct InterventionParams {
  hard_concrete::HardConcreteParams mask;
  std::vector<double> baseline_raw;  // b = tanh(baseline_raw)
  Mode mode = Mode::kSingleStep;

  /// P(z != 0) = p for every unit and b = 0.
  static InterventionParams initial(std::size_t units, Mode mode, double p = 0.5);
  std::vector<double> baseline() const;
  std::size_t units() const { return baseline_raw.size(); }
  void validate() const;
};

struct InterventionTrace {
  std::vector<int> tokens;                         // input token per step
  std::vector<std::vector<double>> original;       // uninstrumented hidden per step
  std::vector<std::vector<double>> altered;        // hidden after substitution
  std::vector<std::vector<double>> original_dist;  // next-token distributions, uninstrumented
  std::vector<std::vector<double>> distributions;  // next-token distributions, intervened
};

struct InterventionOutput {
  std::vector<double> target_distribution;
  InterventionTrace trace;
};

/// Runs the first (length - 1) tokens with and without the substitution.
/// `mask` is either a sampled relaxed mask or a binary one; `baseline` is b
/// itself (already in [-1, 1]).
InterventionOutput forward_with_intervention(const lm::LanguageModel& model, Mode mode, std::span<const double> mask,
                                             std::span<const double> baseline, const lm::EncodedInstance& instance);

/// Columns: step, token, unit, original, altered, kl, top_token. One row per
/// (step, unit).
std::string trace_tsv(const InterventionTrace& trace, std::span<const int> units, const lm::Vocabulary& vocab);

}  // namespace neuroflip::intervention
