#include "neuroflip/search.hpp"

#include "neuroflip/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

namespace neuroflip::search {

using autodiff::Graph;
using autodiff::NodeId;
using autodiff::RealArray;
using intervention::kProbabilityFloor;
using intervention::Mode;

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::string original_input_name(std::size_t step) { return "original." + std::to_string(step); }

// Steps (1-based) that feed the retention term: everything but the one
// predicting the target token.
std::vector<std::size_t> retention_steps(std::size_t length, std::size_t n) {
  std::vector<std::size_t> steps;
  for (std::size_t s = 1; s + 1 <= length; ++s) {
    if (s != n - 1) steps.push_back(s);
  }
  return steps;
}

}  // namespace

std::string to_string(Estimator estimator) { return estimator == Estimator::kRelaxed ? "relaxed" : "reinforce"; }

Estimator estimator_from_string(const std::string& name) {
  if (name == "relaxed") return Estimator::kRelaxed;
  if (name == "reinforce") return Estimator::kReinforce;
  throw std::invalid_argument("unknown estimator '" + name + "' (expected relaxed or reinforce)");
}

void SearchConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("search config: " + what); };
  if (!(alpha > 0.0) || !std::isfinite(alpha)) fail("alpha must be positive");
  if (!(beta > 0.0 && beta <= 1.0)) fail("beta must lie in (0, 1]");
  if (!(lambda_init >= 0.0) || !std::isfinite(lambda_init)) fail("lambda_init must be non-negative");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be non-negative");
  if (!(lambda_learning_rate >= 0.0) || !std::isfinite(lambda_learning_rate)) {
    fail("lambda_learning_rate must be non-negative");
  }
  if (!(kl_weight >= 0.0) || !std::isfinite(kl_weight)) fail("kl_weight must be non-negative");
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (patience < 1) fail("patience must be at least 1");
  if (direction != "to-singular" && direction != "to-plural" && direction != "to-he" && direction != "to-she") {
    fail("unknown direction '" + direction + "'");
  }
}

// --- Contrast assignment ------------------------------------------------------

ContrastPair assign_contrast(std::span<const double> distribution, int a, int b) {
  if (a == b) throw std::invalid_argument("assign_contrast: the pair must differ");
  const double pa = distribution[static_cast<std::size_t>(a)];
  const double pb = distribution[static_cast<std::size_t>(b)];
  if (pa > pb || (pa == pb && a < b)) return {a, b};
  return {b, a};
}

ContrastPair assign_contrast(const lm::LanguageModel& model, const lm::EncodedInstance& instance) {
  return assign_contrast(lm::target_distribution(model, instance), instance.d, instance.t);
}

bool direction_matches_task(datagen::Task task, const std::string& direction) {
  if (task == datagen::Task::kAgreement) return direction == "to-singular" || direction == "to-plural";
  return direction == "to-he" || direction == "to-she";
}

std::string direction_form(const datagen::SentenceInstance& instance, const std::string& direction) {
  if (!direction_matches_task(instance.task, direction)) {
    throw std::invalid_argument("direction '" + direction + "' does not apply to " + datagen::to_string(instance.task) +
                                " instances");
  }
  if (instance.task == datagen::Task::kGender) return direction == "to-he" ? "he" : "she";
  // d is the grammatical form, so it carries the subject's number.
  const bool d_is_plural = instance.attribute == "plural";
  const bool want_plural = direction == "to-plural";
  return d_is_plural == want_plural ? instance.d : instance.t;
}

std::vector<PreparedInstance> prepare_instances(const lm::LanguageModel& model,
                                                const std::vector<datagen::SentenceInstance>& corpus,
                                                const std::string& direction) {
  std::vector<PreparedInstance> out;
  for (const auto& inst : corpus) {
    const int target_form = model.vocab.id(direction_form(inst, direction));
    PreparedInstance p;
    p.encoded = lm::encode(model.vocab, inst);
    const std::size_t steps = p.encoded.tokens.size() - 1;
    lm::SequenceRun run = lm::run_sequence(model, p.encoded.tokens, steps);
    const auto pair = assign_contrast(run.distributions[p.encoded.target_position - 2], p.encoded.d, p.encoded.t);
    if (pair.t != target_form) continue;
    p.encoded.d = pair.d;
    p.encoded.t = pair.t;
    p.original = std::move(run.distributions);
    out.push_back(std::move(p));
  }
  return out;
}

// --- Loss terms -----------------------------------------------------------------

double ratio_loss(std::span<const double> distribution, int d, int t) {
  if (d == t) throw std::invalid_argument("ratio_loss: d and t must differ");
  const double pd = distribution[static_cast<std::size_t>(d)];
  const double pt = distribution[static_cast<std::size_t>(t)];
  return std::exp(std::log(pd + kProbabilityFloor) - std::log(pt + kProbabilityFloor));
}

double kl_retention_loss(const std::vector<std::vector<double>>& original,
                         const std::vector<std::vector<double>>& intervened, std::optional<std::size_t> skip_step) {
  if (original.size() != intervened.size()) throw std::invalid_argument("kl_retention_loss: step counts differ");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < original.size(); ++s) {
    if (skip_step && *skip_step == s) continue;
    total += intervention::kl_divergence(original[s], intervened[s]);
    ++count;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

// --- Optimization state -----------------------------------------------------------

SearchState SearchState::initial(std::size_t units, const SearchConfig& config) {
  SearchState state;
  state.params = intervention::InterventionParams::initial(units, config.mode);
  if (config.estimator == Estimator::kReinforce) state.params.mask.gamma.assign(units, 0.0);
  state.lambda0 = config.lambda_init;
  state.lambda1 = config.lambda_init;
  return state;
}

double update_moving_average(std::optional<double>& average, double loss, double decay) {
  average = average ? decay * *average + (1.0 - decay) * loss : loss;
  return *average;
}

void adam_update(std::span<double> params, std::span<const double> grad, AdamState& state, double learning_rate) {
  if (params.size() != grad.size()) throw std::invalid_argument("adam_update: gradient length differs");
  if (learning_rate == 0.0) return;
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.t = 0;
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  for (std::size_t j = 0; j < params.size(); ++j) {
    state.m[j] = kAdamBeta1 * state.m[j] + (1.0 - kAdamBeta1) * grad[j];
    state.v[j] = kAdamBeta2 * state.v[j] + (1.0 - kAdamBeta2) * grad[j] * grad[j];
    params[j] -= learning_rate * (state.m[j] / c1) / (std::sqrt(state.v[j] / c2) + kAdamEpsilon);
  }
}

double ascend_multiplier(double lambda, double violation, double rate) {
  return std::max(0.0, lambda + rate * violation);
}

// --- Objective graph ---------------------------------------------------------------

ObjectiveGraph::ObjectiveGraph(const lm::LMConfig& config, const SearchConfig& search, std::size_t batch,
                               std::size_t length, std::size_t i, std::size_t n,
                               const hard_concrete::HardConcreteParams& shape)
    : batch_(batch) {
  if (i < 1 || i >= n || n > length) throw std::invalid_argument("objective graph: need 1 <= i < n <= length");
  const auto k = static_cast<std::size_t>(config.units());
  const auto V = static_cast<std::size_t>(config.vocab_size);
  Graph& g = graph_;

  const NodeId gamma = g.input("gamma", {k});
  const NodeId baseline = g.tanh(g.input("baseline_raw", {k}));
  const NodeId mask = search.estimator == Estimator::kRelaxed
                          ? hard_concrete::graph_sample(g, gamma, g.input("noise", {batch, k}), shape)
                          : g.input("mask", {batch, k});

  const Mode mode = search.mode;
  const lm::GraphHiddenHook hook = [&](Graph& gr, NodeId h, int step) {
    if (!intervention::intervenes_at(mode, static_cast<std::size_t>(step), i, n)) return h;
    return gr.sub(h, gr.mul(mask, gr.sub(h, baseline)));
  };
  const lm::SequenceGraph seq = lm::build_sequence_graph(g, config, batch, length - 1, hook);

  const NodeId probs = g.softmax(seq.logits[n - 2]);
  const NodeId pd = g.pick(probs, g.input("d", {batch}));
  const NodeId pt = g.pick(probs, g.input("t", {batch}));
  ratios_ = g.exp(g.sub(g.log(g.add_scalar(pd, kProbabilityFloor)), g.log(g.add_scalar(pt, kProbabilityFloor))));

  // KL(p_O || p_I) = sum p_O log(p_O + e) - sum p_O log(p_I + e); the first
  // sum is bound as "kl_const".
  const auto steps = retention_steps(length, n);
  std::optional<NodeId> cross;
  for (std::size_t s : steps) {
    const NodeId log_pi = g.log(g.add_scalar(g.softmax(seq.logits[s - 1]), kProbabilityFloor));
    const NodeId term = g.mul(g.input(original_input_name(s), {batch, V}), log_pi);
    cross = cross ? g.add(*cross, term) : term;
  }
  const NodeId kl_const = g.input("kl_const", {batch, 1});
  if (cross) {
    const NodeId row_sums = g.matmul(*cross, g.constant(RealArray(autodiff::Shape{V, 1}, std::vector<double>(V, 1.0))));
    kl_rows_ = g.scale(g.sub(kl_const, row_sums), 1.0 / static_cast<double>(steps.size()));
  } else {
    kl_rows_ = g.scale(kl_const, 0.0);
  }

  NodeId objective = g.mean(ratios_);
  if (search.kl_weight != 0.0) objective = g.add(objective, g.scale(g.mean(kl_rows_), search.kl_weight));

  c0_ = hard_concrete::graph_expected_c0(g, gamma, shape);
  interior_ = hard_concrete::graph_interior_mass(g, gamma, shape);
  if (search.estimator == Estimator::kRelaxed) {
    const double inv_k = 1.0 / static_cast<double>(k);
    const NodeId lambda0 = g.input("lambda0", {});
    const NodeId lambda1 = g.input("lambda1", {});
    objective = g.add(objective, g.mul(g.add_scalar(g.scale(c0_, inv_k), -search.alpha), lambda0));
    objective = g.add(objective, g.mul(g.add_scalar(g.scale(interior_, inv_k), -search.beta), lambda1));
  }
  objective_ = objective;
}

BatchBinding::BatchBinding(const lm::LanguageModel& model, std::span<const PreparedInstance* const> batch,
                           const SearchState& state, RealArray mask_or_noise, Estimator estimator) {
  if (batch.empty()) throw std::invalid_argument("batch binding: empty batch");
  const std::size_t B = batch.size();
  const auto& first = batch[0]->encoded;
  const std::size_t length = first.tokens.size();
  const std::size_t n = first.target_position;
  const auto V = static_cast<std::size_t>(model.config.vocab_size);
  for (const auto* p : batch) {
    if (p->encoded.tokens.size() != length || p->encoded.target_position != n ||
        p->encoded.intervention_position != first.intervention_position) {
      throw std::invalid_argument("batch binding: instances differ in shape");
    }
  }
  auto own = [&](RealArray a) -> const RealArray& { return owned_.emplace_back(std::move(a)); };

  lm::bind_parameters(inputs_, model.params);
  inputs_.bind("gamma", own(RealArray::vector(state.params.mask.gamma)));
  inputs_.bind("baseline_raw", own(RealArray::vector(state.params.baseline_raw)));
  inputs_.bind(estimator == Estimator::kRelaxed ? "noise" : "mask", own(std::move(mask_or_noise)));
  inputs_.bind("lambda0", own(RealArray::scalar(state.lambda0)));
  inputs_.bind("lambda1", own(RealArray::scalar(state.lambda1)));

  std::vector<double> d(B), t(B);
  for (std::size_t b = 0; b < B; ++b) {
    d[b] = batch[b]->encoded.d;
    t[b] = batch[b]->encoded.t;
  }
  inputs_.bind("d", own(RealArray::vector(std::move(d))));
  inputs_.bind("t", own(RealArray::vector(std::move(t))));

  for (std::size_t s = 1; s < length; ++s) {
    std::vector<double> tok(B);
    for (std::size_t b = 0; b < B; ++b) tok[b] = batch[b]->encoded.tokens[s - 1];
    inputs_.bind(lm::token_input_name(s), own(RealArray::vector(std::move(tok))));
  }

  std::vector<double> kl_const(B, 0.0);
  for (std::size_t s : retention_steps(length, n)) {
    std::vector<double> orig(B * V);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& dist = batch[b]->original.at(s - 1);
      std::copy(dist.begin(), dist.end(), orig.begin() + static_cast<std::ptrdiff_t>(b * V));
      for (double p : dist) kl_const[b] += p * std::log(p + kProbabilityFloor);
    }
    inputs_.bind(original_input_name(s), own(RealArray::matrix(B, V, std::move(orig))));
  }
  inputs_.bind("kl_const", own(RealArray::matrix(B, 1, std::move(kl_const))));
}

namespace {

struct Evaluated {
  autodiff::Evaluation ev;
  autodiff::Gradients grads;
};

Evaluated evaluate_batch(const ObjectiveGraph& graph, const BatchBinding& binding, const std::set<std::string>& wrt) {
  try {
    Evaluated out{autodiff::evaluate(graph.graph(), binding.inputs()), {}};
    out.grads = autodiff::backpropagate(graph.graph(), out.ev, graph.objective(), wrt);
    for (const auto& [name, grad] : out.grads.by_input) {
      if (!grad.all_finite()) throw NumericalFailure("search: non-finite gradient for " + name);
    }
    return out;
  } catch (const autodiff::NumericalError& e) {
    throw NumericalFailure(std::string("search: objective is not finite: ") + e.what());
  }
}

void fill_diagnostics(StepDiagnostics& diag, const ObjectiveGraph& graph, const autodiff::Evaluation& ev) {
  diag.objective = ev.value(graph.objective()).item();
  const auto ratios = ev.value(graph.ratios()).values();
  const auto kls = ev.value(graph.kl_rows()).values();
  double ratio_sum = 0.0, kl_sum = 0.0;
  for (std::size_t b = 0; b < ratios.size(); ++b) {
    ratio_sum += ratios[b];
    kl_sum += kls[b];
    if (ratios[b] < 1.0) ++diag.flipped;
  }
  diag.mean_ratio = ratio_sum / static_cast<double>(ratios.size());
  diag.mean_kl = kl_sum / static_cast<double>(ratios.size());
}

}  // namespace

StepDiagnostics lagrangian_step(const lm::LanguageModel& model, const SearchConfig& config, SearchState& state,
                                std::span<const PreparedInstance* const> batch, ObjectiveGraph& graph, Rng& rng) {
  const std::size_t k = state.params.units();
  std::vector<double> noise(batch.size() * k);
  for (auto& v : noise) {
    const double u = rng.uniform_open();
    v = std::log(u) - std::log1p(-u);
  }
  const BatchBinding binding(model, batch, state, RealArray::matrix(batch.size(), k, std::move(noise)),
                             Estimator::kRelaxed);
  const Evaluated out = evaluate_batch(graph, binding, {"gamma", "baseline_raw"});

  StepDiagnostics diag;
  fill_diagnostics(diag, graph, out.ev);
  diag.expected_c0 = out.ev.value(graph.c0()).item();
  diag.interior = out.ev.value(graph.interior()).item();

  adam_update(state.params.mask.gamma, out.grads["gamma"].values(), state.adam_gamma, config.learning_rate);
  adam_update(state.params.baseline_raw, out.grads["baseline_raw"].values(), state.adam_baseline,
              config.learning_rate);
  if (!config.freeze_lambda) {
    const double kd = static_cast<double>(k);
    state.lambda0 = ascend_multiplier(state.lambda0, diag.expected_c0 / kd - config.alpha, config.lambda_learning_rate);
    state.lambda1 = ascend_multiplier(state.lambda1, diag.interior / kd - config.beta, config.lambda_learning_rate);
  }
  ++state.step;
  diag.lambda0 = state.lambda0;
  diag.lambda1 = state.lambda1;
  return diag;
}

std::vector<double> score_function_gradient(std::span<const double> losses, double reference,
                                            std::span<const double> draws, std::span<const double> prob) {
  const std::size_t k = prob.size();
  const std::size_t B = losses.size();
  if (draws.size() != B * k) throw std::invalid_argument("score_function_gradient: draws must be [B, k]");
  std::vector<double> grad(k, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const double advantage = (losses[b] - reference) / static_cast<double>(B);
    for (std::size_t j = 0; j < k; ++j) grad[j] += advantage * (draws[b * k + j] - prob[j]);
  }
  return grad;
}

StepDiagnostics reinforce_step(const lm::LanguageModel& model, const SearchConfig& config, SearchState& state,
                               std::span<const PreparedInstance* const> batch, ObjectiveGraph& graph, Rng& rng) {
  const std::size_t k = state.params.units();
  const std::size_t B = batch.size();
  std::vector<double> prob(k);
  for (std::size_t j = 0; j < k; ++j) prob[j] = sigmoid(state.params.mask.gamma[j]);
  std::vector<double> draws(B * k);
  for (std::size_t j = 0; j < draws.size(); ++j) draws[j] = rng.uniform() < prob[j % k] ? 1.0 : 0.0;

  const BatchBinding binding(model, batch, state, RealArray::matrix(B, k, draws), Estimator::kReinforce);
  const Evaluated out = evaluate_batch(graph, binding, {"baseline_raw"});

  StepDiagnostics diag;
  fill_diagnostics(diag, graph, out.ev);
  const auto ratios = out.ev.value(graph.ratios()).values();
  const auto kls = out.ev.value(graph.kl_rows()).values();
  std::vector<double> losses(B);
  double mean_loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    losses[b] = ratios[b] + config.kl_weight * kls[b];
    mean_loss += losses[b] / static_cast<double>(B);
  }
  const double reference = state.moving_average.value_or(mean_loss);
  update_moving_average(state.moving_average, mean_loss);

  std::vector<double> grad_gamma = score_function_gradient(losses, reference, draws, prob);
  double c0 = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    grad_gamma[j] += state.lambda0 / static_cast<double>(k) * prob[j] * (1.0 - prob[j]);
    c0 += prob[j];
  }
  for (double g : grad_gamma) {
    if (!std::isfinite(g)) throw NumericalFailure("search: non-finite score-function gradient");
  }
  diag.expected_c0 = c0;
  diag.objective = mean_loss + state.lambda0 * (c0 / static_cast<double>(k) - config.alpha);

  adam_update(state.params.mask.gamma, grad_gamma, state.adam_gamma, config.learning_rate);
  adam_update(state.params.baseline_raw, out.grads["baseline_raw"].values(), state.adam_baseline,
              config.learning_rate);
  if (!config.freeze_lambda) {
    state.lambda0 = ascend_multiplier(state.lambda0, c0 / static_cast<double>(k) - config.alpha,
                                      config.lambda_learning_rate);
  }
  ++state.step;
  diag.lambda0 = state.lambda0;
  diag.lambda1 = state.lambda1;
  return diag;
}

// --- Evaluation and full runs ---------------------------------------------------------

MaskEvaluation evaluate_mask(const lm::LanguageModel& model, Mode mode, std::span<const double> mask,
                             std::span<const double> baseline, std::span<const PreparedInstance> instances) {
  if (instances.empty()) throw std::invalid_argument("empty evaluation set");
  const auto k = static_cast<std::size_t>(model.config.units());
  if (mask.size() != k || baseline.size() != k) throw std::invalid_argument("evaluate_mask: length differs from k");
  MaskEvaluation result;
  std::size_t flipped = 0;
  double kl_total = 0.0;
  for (const auto& inst : instances) {
    const auto& enc = inst.encoded;
    const std::size_t i = enc.intervention_position;
    const std::size_t n = enc.target_position;
    const lm::HiddenHook hook = [&](std::span<const double> h, int step) {
      if (!intervention::intervenes_at(mode, static_cast<std::size_t>(step), i, n)) {
        return std::vector<double>(h.begin(), h.end());
      }
      return intervention::apply_mask(h, mask, baseline);
    };
    const lm::SequenceRun run = lm::run_sequence(model, enc.tokens, enc.tokens.size() - 1, hook);
    if (ratio_loss(run.distributions[n - 2], enc.d, enc.t) < 1.0) ++flipped;
    kl_total += kl_retention_loss(inst.original, run.distributions, n - 2);
  }
  result.instances = instances.size();
  result.accuracy = static_cast<double>(flipped) / static_cast<double>(instances.size());
  result.mean_kl = kl_total / static_cast<double>(instances.size());
  return result;
}

std::vector<int> final_mask(const SearchState& state, Estimator estimator) {
  if (estimator == Estimator::kRelaxed) return hard_concrete::discretize(state.params.mask);
  std::vector<int> mask(state.params.units());
  for (std::size_t j = 0; j < mask.size(); ++j) mask[j] = sigmoid(state.params.mask.gamma[j]) > 0.5 ? 1 : 0;
  return mask;
}

SearchResult run_search(const lm::LanguageModel& model, const std::vector<datagen::SentenceInstance>& train,
                        const std::vector<datagen::SentenceInstance>& eval, const SearchConfig& config,
                        const EpochObserver& observer) {
  config.validate();
  return run_search_prepared(model, prepare_instances(model, train, config.direction),
                             prepare_instances(model, eval, config.direction), config, observer);
}

SearchResult run_search_prepared(const lm::LanguageModel& model, std::vector<PreparedInstance> train,
                                 const std::vector<PreparedInstance>& eval, const SearchConfig& config,
                                 const EpochObserver& observer) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("search: no training instances for direction " + config.direction);
  if (eval.empty()) throw std::invalid_argument("search: no evaluation instances for direction " + config.direction);
  const auto start = std::chrono::steady_clock::now();
  const auto k = static_cast<std::size_t>(model.config.units());

  Rng rng(config.seed);
  rng.shuffle(train);
  if (config.max_train > 0 && train.size() > config.max_train) train.resize(config.max_train);

  using Shape = std::tuple<std::size_t, std::size_t, std::size_t>;
  std::map<Shape, std::vector<const PreparedInstance*>> buckets;
  for (const auto& p : train) {
    buckets[{p.encoded.tokens.size(), p.encoded.intervention_position, p.encoded.target_position}].push_back(&p);
  }

  SearchState state = SearchState::initial(k, config);
  std::map<std::pair<Shape, std::size_t>, ObjectiveGraph> graphs;
  const auto B = static_cast<std::size_t>(config.batch_size);

  std::vector<double> acc_history, c0_history;
  SearchResult result;
  result.config = config;
  result.total_units = k;
  result.train_instances = train.size();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::pair<Shape, std::vector<const PreparedInstance*>>> batches;
    for (auto& [shape, members] : buckets) {
      rng.shuffle(members);
      for (std::size_t s = 0; s < members.size(); s += B) {
        const std::size_t e = std::min(members.size(), s + B);
        batches.emplace_back(shape, std::vector<const PreparedInstance*>(members.begin() + static_cast<std::ptrdiff_t>(s),
                                                                         members.begin() + static_cast<std::ptrdiff_t>(e)));
      }
    }
    rng.shuffle(batches);

    std::size_t flipped = 0;
    StepDiagnostics last;
    for (const auto& [shape, members] : batches) {
      const auto key = std::make_pair(shape, members.size());
      auto it = graphs.find(key);
      if (it == graphs.end()) {
        const auto& [length, i, n] = shape;
        it = graphs.try_emplace(key, model.config, config, members.size(), length, i, n, state.params.mask).first;
      }
      last = config.estimator == Estimator::kRelaxed ? lagrangian_step(model, config, state, members, it->second, rng)
                                                     : reinforce_step(model, config, state, members, it->second, rng);
      flipped += last.flipped;
    }
    const double train_acc = static_cast<double>(flipped) / static_cast<double>(train.size());
    double c0 = 0.0;
    if (config.estimator == Estimator::kRelaxed) {
      c0 = hard_concrete::expected_c0(state.params.mask);
    } else {
      for (double g : state.params.mask.gamma) c0 += sigmoid(g);
    }
    last.expected_c0 = c0;
    acc_history.push_back(train_acc);
    c0_history.push_back(c0);
    result.epochs_run = epoch + 1;
    result.train_accuracy = train_acc;
    if (observer) observer(epoch + 1, last, train_acc);

    const auto window = static_cast<std::size_t>(config.patience);
    if (acc_history.size() >= window) {
      auto range = [&](const std::vector<double>& h) {
        const auto [lo, hi] = std::minmax_element(h.end() - static_cast<std::ptrdiff_t>(window), h.end());
        return *hi - *lo;
      };
      if (range(acc_history) <= config.accuracy_tolerance && range(c0_history) <= config.c0_tolerance) {
        result.converged = true;
        break;
      }
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const std::vector<int> mask = final_mask(state, config.estimator);
  const std::vector<double> baseline = state.params.baseline();
  const std::vector<double> mask_values(mask.begin(), mask.end());
  const MaskEvaluation evaluation = evaluate_mask(model, config.mode, mask_values, baseline, eval);

  for (std::size_t j = 0; j < k; ++j) {
    if (mask[j] == 1) {
      result.units.push_back(static_cast<int>(j));
      result.baselines.push_back(baseline[j]);
    }
  }
  result.accuracy = evaluation.accuracy;
  result.mean_kl = evaluation.mean_kl;
  result.eval_instances = evaluation.instances;
  result.expected_c0 = c0_history.back();
  result.lambda0 = state.lambda0;
  result.lambda1 = state.lambda1;
  result.steps = state.step;
  result.degenerate = result.units.empty();
  result.constraint_violated = static_cast<double>(result.units.size()) > config.alpha * static_cast<double>(k);
  result.run_id = to_string(config.estimator) + "-" + intervention::to_string(config.mode) + "-" + config.direction +
                  "-seed" + std::to_string(config.seed);
  return result;
}

// --- Aggregation ----------------------------------------------------------------------

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

}  // namespace

Aggregate aggregate_runs(std::span<const SearchResult> results) {
  if (results.empty()) throw std::invalid_argument("aggregate_runs: no results");
  Aggregate agg;
  agg.runs = results.size();
  std::map<int, std::vector<double>> per_unit;
  std::vector<double> acc, units, kl;
  for (const auto& r : results) {
    for (std::size_t j = 0; j < r.units.size(); ++j) per_unit[r.units[j]].push_back(r.baselines.at(j));
    acc.push_back(r.accuracy);
    units.push_back(static_cast<double>(r.units.size()));
    kl.push_back(r.mean_kl);
  }
  for (const auto& [unit, baselines] : per_unit) {
    UnitPrevalence u;
    u.unit = unit;
    u.runs = baselines.size();
    u.prevalence = static_cast<double>(baselines.size()) / static_cast<double>(results.size());
    std::tie(u.baseline_mean, u.baseline_std) = mean_std(baselines);
    agg.units.push_back(u);
  }
  std::stable_sort(agg.units.begin(), agg.units.end(),
                   [](const UnitPrevalence& a, const UnitPrevalence& b) { return a.runs > b.runs; });
  std::tie(agg.accuracy_mean, agg.accuracy_std) = mean_std(acc);
  std::tie(agg.units_mean, agg.units_std) = mean_std(units);
  std::tie(agg.kl_mean, agg.kl_std) = mean_std(kl);
  return agg;
}

// --- Serialization ------------------------------------------------------------------

namespace {

using Json = nlohmann::ordered_json;

Json config_json(const SearchConfig& c) {
  return Json{{"alpha", c.alpha},
              {"beta", c.beta},
              {"lambda_init", c.lambda_init},
              {"learning_rate", c.learning_rate},
              {"lambda_learning_rate", c.lambda_learning_rate},
              {"kl_weight", c.kl_weight},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"max_train", c.max_train},
              {"seed", c.seed},
              {"mode", intervention::to_string(c.mode)},
              {"direction", c.direction},
              {"estimator", to_string(c.estimator)},
              {"patience", c.patience},
              {"accuracy_tolerance", c.accuracy_tolerance},
              {"c0_tolerance", c.c0_tolerance},
              {"freeze_lambda", c.freeze_lambda}};
}

SearchConfig config_from_json(const Json& j) {
  SearchConfig c;
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.lambda_init = j.at("lambda_init").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.lambda_learning_rate = j.at("lambda_learning_rate").get<double>();
  c.kl_weight = j.at("kl_weight").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_train = j.at("max_train").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.mode = intervention::mode_from_string(j.at("mode").get<std::string>());
  c.direction = j.at("direction").get<std::string>();
  c.estimator = estimator_from_string(j.at("estimator").get<std::string>());
  c.patience = j.at("patience").get<int>();
  c.accuracy_tolerance = j.at("accuracy_tolerance").get<double>();
  c.c0_tolerance = j.at("c0_tolerance").get<double>();
  c.freeze_lambda = j.at("freeze_lambda").get<bool>();
  return c;
}

}  // namespace

std::string config_to_json(const SearchConfig& config) { return config_json(config).dump(); }

std::string to_json_line(const SearchResult& r, bool include_timing) {
  Json j{{"run_id", r.run_id},
         {"config", config_json(r.config)},
         {"units", r.units},
         {"baselines", r.baselines},
         {"accuracy", r.accuracy},
         {"num_units", r.units.size()},
         {"total_units", r.total_units},
         {"mean_kl", r.mean_kl},
         {"train_accuracy", r.train_accuracy},
         {"expected_c0", r.expected_c0},
         {"lambda0", r.lambda0},
         {"lambda1", r.lambda1},
         {"train_instances", r.train_instances},
         {"eval_instances", r.eval_instances},
         {"steps", r.steps},
         {"epochs_run", r.epochs_run},
         {"converged", r.converged},
         {"degenerate", r.degenerate},
         {"constraint_violated", r.constraint_violated}};
  if (r.degenerate) j["flag"] = "degenerate (empty mask)";
  if (include_timing) j["seconds"] = r.seconds;
  return j.dump();
}

SearchResult from_json_line(const std::string& line) {
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw std::invalid_argument(std::string("result record is not valid JSON: ") + e.what());
  }
  try {
    SearchResult r;
    r.run_id = j.at("run_id").get<std::string>();
    r.config = config_from_json(j.at("config"));
    r.units = j.at("units").get<std::vector<int>>();
    r.baselines = j.at("baselines").get<std::vector<double>>();
    r.accuracy = j.at("accuracy").get<double>();
    r.total_units = j.at("total_units").get<std::size_t>();
    r.mean_kl = j.at("mean_kl").get<double>();
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.expected_c0 = j.at("expected_c0").get<double>();
    r.lambda0 = j.at("lambda0").get<double>();
    r.lambda1 = j.at("lambda1").get<double>();
    r.train_instances = j.at("train_instances").get<std::size_t>();
    r.eval_instances = j.at("eval_instances").get<std::size_t>();
    r.steps = j.at("steps").get<long long>();
    r.epochs_run = j.at("epochs_run").get<int>();
    r.converged = j.at("converged").get<bool>();
    r.degenerate = j.at("degenerate").get<bool>();
    r.constraint_violated = j.at("constraint_violated").get<bool>();
    if (j.contains("seconds")) r.seconds = j.at("seconds").get<double>();
    if (r.units.size() != r.baselines.size()) throw std::invalid_argument("units and baselines differ in length");
    return r;
  } catch (const Json::exception& e) {
    throw std::invalid_argument(std::string("result record: ") + e.what());
  }
}

std::string aggregate_tsv(const Aggregate& agg) {
  std::ostringstream out;
  out.precision(6);
  out << "unit\truns\tprevalence\tbaseline_mean\tbaseline_std\n";
  for (const auto& u : agg.units) {
    out << u.unit << '\t' << u.runs << '\t' << u.prevalence << '\t' << u.baseline_mean << '\t' << u.baseline_std
        << '\n';
  }
  return out.str();
}

}  // namespace neuroflip::search
