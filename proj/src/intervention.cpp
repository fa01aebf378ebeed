#include "neuroflip/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace neuroflip::intervention {

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: distributions differ in length");
  double total = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] == q[j]) continue;
    total += p[j] * (std::log(p[j] + kProbabilityFloor) - std::log(q[j] + kProbabilityFloor));
  }
  return total;
}

std::string to_string(Mode mode) { return mode == Mode::kSingleStep ? "single" : "every"; }

Mode mode_from_string(const std::string& name) {
  if (name == "single") return Mode::kSingleStep;
  if (name == "every") return Mode::kEveryStep;
  throw std::invalid_argument("unknown intervention mode '" + name + "' (expected single or every)");
}

std::vector<double> apply_mask(std::span<const double> h, std::span<const double> m, std::span<const double> b) {
  if (h.size() != m.size() || h.size() != b.size()) {
    throw std::invalid_argument("apply_mask: lengths differ (h " + std::to_string(h.size()) + ", m " +
                                std::to_string(m.size()) + ", b " + std::to_string(b.size()) + ")");
  }
  std::vector<double> out(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) out[j] = m[j] == 0.0 ? h[j] : (1.0 - m[j]) * h[j] + m[j] * b[j];
  return out;
}

bool intervenes_at(Mode mode, std::size_t step, std::size_t i, std::size_t n) {
  if (mode == Mode::kSingleStep) return step == i;
  return step >= 1 && step < n;
}

InterventionParams InterventionParams::initial(std::size_t units, Mode mode, double p) {
  InterventionParams params;
  params.mask = hard_concrete::HardConcreteParams::with_prob_nonzero(units, p);
  params.baseline_raw.assign(units, 0.0);
  params.mode = mode;
  return params;
}

std::vector<double> InterventionParams::baseline() const {
  std::vector<double> b(baseline_raw.size());
  std::transform(baseline_raw.begin(), baseline_raw.end(), b.begin(), [](double v) { return std::tanh(v); });
  return b;
}

void InterventionParams::validate() const {
  mask.validate();
  if (mask.size() != baseline_raw.size()) throw std::invalid_argument("intervention: mask and baseline lengths differ");
  for (double v : baseline_raw) {
    if (!std::isfinite(v)) throw std::invalid_argument("intervention: non-finite baseline");
  }
}

InterventionOutput forward_with_intervention(const lm::LanguageModel& model, Mode mode, std::span<const double> mask,
                                             std::span<const double> baseline, const lm::EncodedInstance& instance) {
  const std::size_t i = instance.intervention_position;
  const std::size_t n = instance.target_position;
  if (i < 1 || i >= n) {
    throw std::invalid_argument("forward_with_intervention: need 1 <= i < n, got i = " + std::to_string(i) +
                                ", n = " + std::to_string(n));
  }
  if (n > instance.tokens.size()) throw std::invalid_argument("forward_with_intervention: target beyond sentence");
  const auto k = static_cast<std::size_t>(model.config.units());
  if (mask.size() != k || baseline.size() != k) {
    throw std::invalid_argument("forward_with_intervention: mask/baseline length differs from unit count " +
                                std::to_string(k));
  }
  const std::size_t steps = instance.tokens.size() - 1;

  const lm::SequenceRun original = lm::run_sequence(model, instance.tokens, steps);
  const lm::HiddenHook hook = [&](std::span<const double> h, int step) {
    if (!intervenes_at(mode, static_cast<std::size_t>(step), i, n)) return std::vector<double>(h.begin(), h.end());
    return apply_mask(h, mask, baseline);
  };
  lm::SequenceRun altered = lm::run_sequence(model, instance.tokens, steps, hook);

  InterventionOutput out;
  out.target_distribution = altered.distributions[n - 2];
  out.trace.tokens.assign(instance.tokens.begin(), instance.tokens.begin() + static_cast<std::ptrdiff_t>(steps));
  out.trace.original = original.hidden;
  out.trace.original_dist = original.distributions;
  out.trace.altered = std::move(altered.hidden);
  out.trace.distributions = std::move(altered.distributions);
  return out;
}

std::string trace_tsv(const InterventionTrace& trace, std::span<const int> units, const lm::Vocabulary& vocab) {
  std::ostringstream out;
  out.precision(17);
  out << "step\ttoken\tunit\toriginal\taltered\tkl\ttop_token\n";
  for (std::size_t s = 0; s < trace.tokens.size(); ++s) {
    const double kl = kl_divergence(trace.original_dist[s], trace.distributions[s]);
    const auto& dist = trace.distributions[s];
    const auto top = static_cast<int>(std::max_element(dist.begin(), dist.end()) - dist.begin());
    for (int u : units) {
      if (u < 0 || static_cast<std::size_t>(u) >= trace.original[s].size()) {
        throw std::out_of_range("trace_tsv: unit " + std::to_string(u) + " out of range");
      }
      out << (s + 1) << '\t' << vocab.token(trace.tokens[s]) << '\t' << u << '\t' << trace.original[s][u] << '\t'
          << trace.altered[s][u] << '\t' << kl << '\t' << vocab.token(top) << '\n';
    }
  }
  return out.str();
}

}  // namespace neuroflip::intervention
