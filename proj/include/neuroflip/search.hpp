#pragma once

// Learning a sparse intervention (mask m, baseline b) that flips the frozen
// LM's preference between the contrast pair at the target position.
//
// Objective per batch, averaged over instances:
//   ratio + kl_weight * KL + lambda0 * (C0 / k - alpha) + lambda1 * (C01 / k - beta)
// minimized over the mask logits and the raw baseline, maximized over the
// multipliers. The REINFORCE variant swaps the Hard Concrete mask for
// independent Bernoulli draws and a score-function gradient.

#include "neuroflip/autodiff.hpp"
#include "neuroflip/datagen.hpp"
#include "neuroflip/intervention.hpp"
#include "neuroflip/lstm_lm.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuroflip::search {

enum class Estimator { kRelaxed, kReinforce };

std::string to_string(Estimator estimator);
/// Accepts "relaxed" and "reinforce".
Estimator estimator_from_string(const std::string& name);

class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SearchConfig {
  double alpha = 0.04;  // budget on expected C0 as a fraction of k
  double beta = 0.01;   // budget on interior mass as a fraction of k
  double lambda_init = 0.0;
  double learning_rate = 5e-2;
  double lambda_learning_rate = 2.0;
  double kl_weight = 1.0;
  int epochs = 50;
  int batch_size = 32;
  std::size_t max_train = 1000;  // cap on training instances, 0 keeps all
  std::uint64_t seed = 1;
  intervention::Mode mode = intervention::Mode::kSingleStep;
  std::string direction = "to-plural";
  Estimator estimator = Estimator::kRelaxed;
  // Early stop once train accuracy and expected C0 have stayed within these
  // ranges for `patience` consecutive epochs.
  int patience = 5;
  double accuracy_tolerance = 0.01;
  double c0_tolerance = 0.1;
  bool freeze_lambda = false;  // keep the multipliers at lambda_init

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// --- Contrast assignment ------------------------------------------------------

struct ContrastPair {
  int d = 0;
  int t = 0;
};

/// d is the more probable of a and b; an exact tie goes to the lower id.
ContrastPair assign_contrast(std::span<const double> distribution, int a, int b);
/// Uses the uninstrumented LM's distribution at the target position.
ContrastPair assign_contrast(const lm::LanguageModel& model, const lm::EncodedInstance& instance);

/// Directions: "to-singular" / "to-plural" for agreement, "to-he" / "to-she"
/// for gender. Returns the surface form the direction steers towards.
std::string direction_form(const datagen::SentenceInstance& instance, const std::string& direction);
bool direction_matches_task(datagen::Task task, const std::string& direction);

/// An instance ready for search: contrast assigned by the model, original
/// per-step distributions cached for the retention term.
struct PreparedInstance {
  lm::EncodedInstance encoded;
  std::vector<std::vector<double>> original;  // next-token distribution per step
};

/// Encodes, assigns d/t from the model's preference and keeps instances
/// whose t is the direction's form.
std::vector<PreparedInstance> prepare_instances(const lm::LanguageModel& model,
                                                const std::vector<datagen::SentenceInstance>& corpus,
                                                const std::string& direction);

// --- Loss terms -----------------------------------------------------------------

/// (p_d + floor) / (p_t + floor).
double ratio_loss(std::span<const double> distribution, int d, int t);

/// Mean per-step KL(original || intervened). `skip_step` (0-based) is left
/// out of both the sum and the count.
double kl_retention_loss(const std::vector<std::vector<double>>& original,
                         const std::vector<std::vector<double>>& intervened,
                         std::optional<std::size_t> skip_step = std::nullopt);

// --- Optimization state -----------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long long t = 0;
};

struct SearchState {
  intervention::InterventionParams params;
  double lambda0 = 0.0;
  double lambda1 = 0.0;
  AdamState adam_gamma;
  AdamState adam_baseline;
  std::optional<double> moving_average;  // REINFORCE loss baseline
  long long step = 0;

  static SearchState initial(std::size_t units, const SearchConfig& config);
};

/// decay * avg + (1 - decay) * loss; the first observation initializes.
double update_moving_average(std::optional<double>& average, double loss, double decay = 0.9);

/// One Adam update in place. Zero learning rate leaves params unchanged.
void adam_update(std::span<double> params, std::span<const double> grad, AdamState& state, double learning_rate);

/// Projected ascent: max(0, lambda + rate * violation).
double ascend_multiplier(double lambda, double violation, double rate);

struct StepDiagnostics {
  double objective = 0.0;
  double mean_ratio = 0.0;
  double mean_kl = 0.0;
  double expected_c0 = 0.0;
  double interior = 0.0;
  double lambda0 = 0.0;
  double lambda1 = 0.0;
  std::size_t flipped = 0;  // instances with sampled-mask ratio < 1
};

/// The objective for one batch recorded as a graph. Batch members must share
/// length, i and n. Inputs: LM parameters, "gamma", "baseline_raw",
/// "lambda0", "lambda1", per-step tokens and original distributions, "d",
/// "t", and "noise" (Hard Concrete noise logits) or "mask" (Bernoulli draws).
class ObjectiveGraph {
 public:
  ObjectiveGraph(const lm::LMConfig& config, const SearchConfig& search, std::size_t batch, std::size_t length,
                 std::size_t i, std::size_t n, const hard_concrete::HardConcreteParams& shape);

  const autodiff::Graph& graph() const { return graph_; }
  autodiff::NodeId objective() const { return objective_; }
  autodiff::NodeId ratios() const { return ratios_; }    // [B]
  autodiff::NodeId kl_rows() const { return kl_rows_; }  // [B, 1]
  autodiff::NodeId c0() const { return c0_; }
  autodiff::NodeId interior() const { return interior_; }
  std::size_t batch() const { return batch_; }

 private:
  autodiff::Graph graph_;
  autodiff::NodeId objective_{}, ratios_{}, kl_rows_{}, c0_{}, interior_{};
  std::size_t batch_;
};

/// Owns every array bound for one evaluation of an ObjectiveGraph.
class BatchBinding {
 public:
  /// `mask_or_noise` is [B, k]: noise logits for the relaxed estimator,
  /// 0/1 draws for REINFORCE.
  BatchBinding(const lm::LanguageModel& model, std::span<const PreparedInstance* const> batch,
               const SearchState& state, autodiff::RealArray mask_or_noise, Estimator estimator);

  BatchBinding(const BatchBinding&) = delete;
  BatchBinding& operator=(const BatchBinding&) = delete;

  const autodiff::Inputs& inputs() const { return inputs_; }

 private:
  std::deque<autodiff::RealArray> owned_;  // stable addresses for inputs_
  autodiff::Inputs inputs_;
};

/// Relaxed step: fresh noise per instance, descent on (gamma, b), ascent on
/// both multipliers.
StepDiagnostics lagrangian_step(const lm::LanguageModel& model, const SearchConfig& config, SearchState& state,
                                std::span<const PreparedInstance* const> batch, ObjectiveGraph& graph, Rng& rng);

/// Score-function estimate of d E[L] / d gamma for Bernoulli(prob) masks:
/// mean over the batch of (L_b - reference) * (m_b - prob). `draws` is
/// [B, k] row-major.
std::vector<double> score_function_gradient(std::span<const double> losses, double reference,
                                            std::span<const double> draws, std::span<const double> prob);

/// Score-function step with Bernoulli(sigmoid(gamma)) masks.
StepDiagnostics reinforce_step(const lm::LanguageModel& model, const SearchConfig& config, SearchState& state,
                               std::span<const PreparedInstance* const> batch, ObjectiveGraph& graph, Rng& rng);

// --- Evaluation and full runs ---------------------------------------------------------

struct MaskEvaluation {
  double accuracy = 0.0;  // fraction with ratio < 1
  double mean_kl = 0.0;   // non-target steps
  std::size_t instances = 0;
};

MaskEvaluation evaluate_mask(const lm::LanguageModel& model, intervention::Mode mode, std::span<const double> mask,
                             std::span<const double> baseline, std::span<const PreparedInstance> instances);

/// Binary mask after training: Hard Concrete expected value > 0.5, or
/// sigmoid(gamma) > 0.5 for REINFORCE.
std::vector<int> final_mask(const SearchState& state, Estimator estimator);

struct SearchResult {
  std::string run_id;
  SearchConfig config;
  std::vector<int> units;
  std::vector<double> baselines;  // b at the selected units
  double accuracy = 0.0;
  double mean_kl = 0.0;
  double train_accuracy = 0.0;
  double expected_c0 = 0.0;
  double lambda0 = 0.0;
  double lambda1 = 0.0;
  std::size_t train_instances = 0;
  std::size_t eval_instances = 0;
  long long steps = 0;
  int epochs_run = 0;
  bool converged = false;
  bool degenerate = false;            // no unit selected
  bool constraint_violated = false;   // more units than alpha * k
  double seconds = 0.0;               // wall clock to the stopping point
  std::size_t total_units = 0;        // k
};

using EpochObserver = std::function<void(int epoch, const StepDiagnostics& summary, double train_accuracy)>;

/// Trains until early stop or the epoch budget, discretizes and evaluates
/// on `eval`. Throws NumericalFailure if the objective turns non-finite.
SearchResult run_search(const lm::LanguageModel& model, const std::vector<datagen::SentenceInstance>& train,
                        const std::vector<datagen::SentenceInstance>& eval, const SearchConfig& config,
                        const EpochObserver& observer = nullptr);

/// Same as above on already prepared instances.
SearchResult run_search_prepared(const lm::LanguageModel& model, std::vector<PreparedInstance> train,
                                 const std::vector<PreparedInstance>& eval, const SearchConfig& config,
                                 const EpochObserver& observer = nullptr);

struct UnitPrevalence {
  int unit = 0;
  std::size_t runs = 0;
  double prevalence = 0.0;  // fraction of runs selecting the unit
  double baseline_mean = 0.0;
  double baseline_std = 0.0;
};

struct Aggregate {
  std::size_t runs = 0;
  std::vector<UnitPrevalence> units;  // by descending prevalence, then unit id
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double units_mean = 0.0, units_std = 0.0;
  double kl_mean = 0.0, kl_std = 0.0;
};

/// Throws std::invalid_argument for an empty list. Standard deviations are
/// population (divide by n).
Aggregate aggregate_runs(std::span<const SearchResult> results);

// --- Serialization ------------------------------------------------------------------

/// One JSON object, no trailing newline.
std::string to_json_line(const SearchResult& result, bool include_timing = true);
SearchResult from_json_line(const std::string& line);
std::string config_to_json(const SearchConfig& config);
/// Tab-separated prevalence table with a header row.
std::string aggregate_tsv(const Aggregate& aggregate);

}  // namespace neuroflip::search
