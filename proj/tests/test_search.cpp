#include "neuroflip/datagen.hpp"
#include "neuroflip/search.hpp"
#include "oracles.hpp"

#include <catch_amalgamated.hpp>

#include <json.hpp>

#include <random>

using namespace neuroflip;
using namespace neuroflip::search;

namespace {

lm::LanguageModel corpus_model(const std::vector<datagen::SentenceInstance>& corpus, std::uint64_t seed = 3) {
  lm::LanguageModel m;
  m.vocab = lm::Vocabulary::from_corpus(corpus);
  m.config.hidden_size = 8;
  m.config.embedding_size = 8;
  m.config.vocab_size = m.vocab.size();
  m.params = lm::LMParameters::initialize(m.config, seed, 0.5);
  return m;
}

struct Fixture {
  datagen::Split split = datagen::generate_agreement_corpus(17, 200, 60);
  lm::LanguageModel model = corpus_model(split.train);
  std::vector<PreparedInstance> train = prepare_instances(model, split.train, "to-plural");
  std::vector<PreparedInstance> eval = prepare_instances(model, split.eval, "to-plural");
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::vector<const PreparedInstance*> first(const std::vector<PreparedInstance>& v, std::size_t n) {
  std::vector<const PreparedInstance*> out;
  for (std::size_t j = 0; j < n && j < v.size(); ++j) out.push_back(&v[j]);
  return out;
}

// Interior noise: pre-clamp mask values stay well inside (0, 1).
autodiff::RealArray interior_noise(std::size_t rows, std::size_t k, double gamma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> v(rows * k);
  for (auto& x : v) x = -gamma + 0.5 * d(rng);
  return autodiff::RealArray::matrix(rows, k, v);
}

SearchResult fake_result(std::vector<int> units, std::vector<double> baselines, double accuracy = 0.9) {
  SearchResult r;
  r.units = std::move(units);
  r.baselines = std::move(baselines);
  r.accuracy = accuracy;
  r.total_units = 16;
  return r;
}

}  // namespace

TEST_CASE("ratio loss", "[search]") {
  CHECK(ratio_loss(std::vector<double>{0.6, 0.3, 0.1}, 0, 1) == Catch::Approx(2.0).epsilon(1e-8));
  CHECK(ratio_loss(std::vector<double>{0.45, 0.45, 0.1}, 0, 1) == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(ratio_loss(std::vector<double>{0.1, 0.4, 0.5}, 0, 1) == Catch::Approx(0.25).epsilon(1e-8));
  const double guarded = ratio_loss(std::vector<double>{1.0, 0.0}, 0, 1);
  CHECK(std::isfinite(guarded));
  CHECK(guarded > 1.0);
  CHECK_THROWS_AS(ratio_loss(std::vector<double>{0.5, 0.5}, 1, 1), std::invalid_argument);
}

TEST_CASE("contrast assignment", "[search]") {
  const std::vector<double> p{0.1, 0.7, 0.2};
  CHECK(assign_contrast(p, 1, 2).d == 1);
  CHECK(assign_contrast(p, 1, 2).t == 2);
  CHECK(assign_contrast(p, 2, 1).d == 1);
  const std::vector<double> q{0.1, 0.2, 0.7};
  CHECK(assign_contrast(q, 1, 2).d == 2);
  const std::vector<double> tie{0.2, 0.4, 0.4};
  CHECK(assign_contrast(tie, 2, 1).d == 1);
  CHECK(assign_contrast(tie, 1, 2).t == 2);
}

TEST_CASE("direction forms and preparation", "[search]") {
  const auto& f = fixture();
  const auto split = f.split;
  for (const auto& inst : split.train) {
    const std::string plural = direction_form(inst, "to-plural");
    const std::string singular = direction_form(inst, "to-singular");
    CHECK(plural != singular);
    CHECK(plural.back() != 's');
    CHECK(singular == plural + "s");
  }
  CHECK_THROWS_AS(direction_form(split.train[0], "to-he"), std::invalid_argument);
  CHECK(direction_matches_task(datagen::Task::kGender, "to-she"));
  CHECK_FALSE(direction_matches_task(datagen::Task::kGender, "to-plural"));

  // Prepared instances start unflipped and target the direction's form.
  for (const auto& p : f.train) {
    const auto& dist = p.original[p.encoded.target_position - 2];
    CHECK(dist[static_cast<std::size_t>(p.encoded.d)] >= dist[static_cast<std::size_t>(p.encoded.t)]);
    CHECK(f.model.vocab.token(p.encoded.t).back() != 's');
    CHECK(p.original.size() == p.encoded.tokens.size() - 1);
  }
  const auto singular = prepare_instances(f.model, f.split.train, "to-singular");
  CHECK(singular.size() + f.train.size() == f.split.train.size());
}

TEST_CASE("KL retention loss", "[search]") {
  const std::vector<std::vector<double>> a{{0.5, 0.5}, {0.2, 0.8}};
  CHECK(kl_retention_loss(a, a) == 0.0);
  const std::vector<std::vector<double>> one{{0.5, 0.5}}, other{{0.9, 0.1}};
  CHECK(kl_retention_loss(one, other) == Catch::Approx(0.5108).margin(1e-4));
  const std::vector<std::vector<double>> two{{0.5, 0.5}, {0.3, 0.7}}, moved{{0.9, 0.1}, {0.3, 0.7}};
  CHECK(kl_retention_loss(two, moved) == Catch::Approx(oracle::kl({0.5, 0.5}, {0.9, 0.1}) / 2.0).epsilon(1e-6));
  CHECK(kl_retention_loss(two, moved, 0) == 0.0);
}

TEST_CASE("moving average recursion", "[search]") {
  std::optional<double> avg;
  CHECK(update_moving_average(avg, 1.0) == 1.0);
  CHECK(update_moving_average(avg, 0.0) == Catch::Approx(0.9).epsilon(1e-15));
  CHECK(update_moving_average(avg, 0.0) == Catch::Approx(0.81).epsilon(1e-15));
}

TEST_CASE("multiplier ascent", "[search]") {
  CHECK(ascend_multiplier(0.5, 0.2, 1.0) > 0.5);
  CHECK(ascend_multiplier(0.5, -0.2, 1.0) < 0.5);
  CHECK(ascend_multiplier(0.1, -5.0, 1.0) == 0.0);
  CHECK(ascend_multiplier(0.3, 2.0, 0.0) == 0.3);
}

TEST_CASE("adam with zero learning rate is a no-op", "[search]") {
  std::vector<double> p{1.0, -2.0};
  AdamState s;
  adam_update(p, std::vector<double>{3.0, 4.0}, s, 0.0);
  CHECK(p == std::vector<double>{1.0, -2.0});
  adam_update(p, std::vector<double>{3.0, -4.0}, s, 0.1);
  CHECK(p[0] == Catch::Approx(0.9));
  CHECK(p[1] == Catch::Approx(-1.9));
}

TEST_CASE("config validation", "[search]") {
  SearchConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.beta = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.direction = "sideways";
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(estimator_from_string("reinforce") == Estimator::kReinforce);
  CHECK_THROWS_AS(estimator_from_string("sfe2"), std::invalid_argument);
}

TEST_CASE("objective gradient matches finite differences", "[search]") {
  const auto& f = fixture();
  const std::size_t k = static_cast<std::size_t>(f.model.config.units());
  for (auto mode : {intervention::Mode::kSingleStep, intervention::Mode::kEveryStep}) {
    SearchConfig config;
    config.mode = mode;
    SearchState state = SearchState::initial(k, config);
    state.lambda0 = 0.7;
    state.lambda1 = 0.3;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> d(-0.5, 0.5);
    for (auto& b : state.params.baseline_raw) b = d(rng);
    const auto batch = first(f.train, 4);
    const auto& e = batch[0]->encoded;
    ObjectiveGraph graph(f.model.config, config, batch.size(), e.tokens.size(), e.intervention_position,
                         e.target_position, state.params.mask);
    const BatchBinding binding(f.model, batch, state,
                               interior_noise(batch.size(), k, state.params.mask.gamma[0], 9), Estimator::kRelaxed);
    CHECK(autodiff::finite_difference_check(graph.graph(), binding.inputs(), graph.objective(), "gamma", 1e-6) < 1e-3);
    CHECK(autodiff::finite_difference_check(graph.graph(), binding.inputs(), graph.objective(), "baseline_raw", 1e-6) <
          1e-3);
  }
}

TEST_CASE("objective value agrees with the direct computation", "[search]") {
  const auto& f = fixture();
  const std::size_t k = static_cast<std::size_t>(f.model.config.units());
  SearchConfig config;
  config.mode = intervention::Mode::kEveryStep;
  SearchState state = SearchState::initial(k, config);
  const auto batch = first(f.train, 3);
  const auto& e = batch[0]->encoded;
  ObjectiveGraph graph(f.model.config, config, batch.size(), e.tokens.size(), e.intervention_position,
                       e.target_position, state.params.mask);
  const auto noise = interior_noise(batch.size(), k, state.params.mask.gamma[0], 2);
  const BatchBinding binding(f.model, batch, state, noise, Estimator::kRelaxed);
  const auto ev = autodiff::evaluate(graph.graph(), binding.inputs());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<double> u(k);
    for (std::size_t j = 0; j < k; ++j) u[j] = oracle::sigmoid(noise.at(b, j));
    const auto z = hard_concrete::sample_from_noise(state.params.mask, u).z;
    const auto out = intervention::forward_with_intervention(f.model, config.mode, z, state.params.baseline(),
                                                              batch[b]->encoded);
    const double ratio = ratio_loss(out.target_distribution, batch[b]->encoded.d, batch[b]->encoded.t);
    CHECK(ev.value(graph.ratios())[b] == Catch::Approx(ratio).epsilon(1e-8));
    const double kl = kl_retention_loss(batch[b]->original, out.trace.distributions, e.target_position - 2);
    CHECK(ev.value(graph.kl_rows())[b] == Catch::Approx(kl).epsilon(1e-6).margin(1e-12));
  }
}

TEST_CASE("lagrangian step", "[search]") {
  const auto& f = fixture();
  const std::size_t k = static_cast<std::size_t>(f.model.config.units());
  const auto batch = first(f.train, 8);
  const auto& e = batch[0]->encoded;
  Rng rng(1);

  SECTION("lambda0 rises while C0 is above budget") {
    SearchConfig config;
    SearchState state = SearchState::initial(k, config);
    ObjectiveGraph graph(f.model.config, config, batch.size(), e.tokens.size(), e.intervention_position,
                         e.target_position, state.params.mask);
    const auto diag = lagrangian_step(f.model, config, state, batch, graph, rng);
    CHECK(diag.expected_c0 / static_cast<double>(k) > config.alpha);
    CHECK(state.lambda0 > 0.0);
    CHECK(state.step == 1);
  }
  SECTION("lambda0 falls while C0 is below budget") {
    SearchConfig config;
    config.alpha = 0.9;
    config.lambda_init = 1.0;
    SearchState state = SearchState::initial(k, config);
    ObjectiveGraph graph(f.model.config, config, batch.size(), e.tokens.size(), e.intervention_position,
                         e.target_position, state.params.mask);
    lagrangian_step(f.model, config, state, batch, graph, rng);
    CHECK(state.lambda0 < 1.0);
  }
  SECTION("zero learning rates leave the state unchanged") {
    SearchConfig config;
    config.learning_rate = 0.0;
    config.lambda_learning_rate = 0.0;
    config.lambda_init = 0.4;
    SearchState state = SearchState::initial(k, config);
    const SearchState before = state;
    ObjectiveGraph graph(f.model.config, config, batch.size(), e.tokens.size(), e.intervention_position,
                         e.target_position, state.params.mask);
    lagrangian_step(f.model, config, state, batch, graph, rng);
    CHECK(state.params.mask.gamma == before.params.mask.gamma);
    CHECK(state.params.baseline_raw == before.params.baseline_raw);
    CHECK(state.lambda0 == before.lambda0);
    CHECK(state.lambda1 == before.lambda1);
  }
  SECTION("without KL and multipliers the objective is the mean ratio") {
    SearchConfig config;
    config.kl_weight = 0.0;
    config.freeze_lambda = true;
    SearchState state = SearchState::initial(k, config);
    ObjectiveGraph graph(f.model.config, config, batch.size(), e.tokens.size(), e.intervention_position,
                         e.target_position, state.params.mask);
    const auto diag = lagrangian_step(f.model, config, state, batch, graph, rng);
    CHECK(diag.objective == Catch::Approx(diag.mean_ratio).epsilon(1e-12));
    CHECK(state.lambda0 == 0.0);
  }
}

TEST_CASE("score-function estimator", "[search]") {
  SECTION("constant loss gives a zero-mean gradient") {
    const std::vector<double> prob{0.3, 0.5, 0.8};
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t trials = 10000;
    std::vector<double> sum(3, 0.0), sq(3, 0.0);
    for (std::size_t n = 0; n < trials; ++n) {
      std::vector<double> draws(4 * 3);
      for (std::size_t j = 0; j < draws.size(); ++j) draws[j] = u(rng) < prob[j % 3] ? 1.0 : 0.0;
      const std::vector<double> losses(4, 2.5);
      const auto g = score_function_gradient(losses, 1.0, draws, prob);
      for (std::size_t j = 0; j < 3; ++j) {
        sum[j] += g[j];
        sq[j] += g[j] * g[j];
      }
    }
    for (std::size_t j = 0; j < 3; ++j) {
      const double mean = sum[j] / trials;
      const double se = std::sqrt((sq[j] / trials - mean * mean) / trials);
      CHECK(std::abs(mean) <= 3.0 * se);
    }
  }
  SECTION("one-unit toy problem converges to always masking") {
    // Loss 0 when the unit is masked, 1 otherwise.
    std::vector<double> gamma{0.0};
    AdamState adam;
    std::optional<double> avg;
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int step = 0; step < 400; ++step) {
      const std::vector<double> prob{oracle::sigmoid(gamma[0])};
      std::vector<double> draws(16), losses(16);
      double mean = 0.0;
      for (std::size_t b = 0; b < 16; ++b) {
        draws[b] = u(rng) < prob[0] ? 1.0 : 0.0;
        losses[b] = 1.0 - draws[b];
        mean += losses[b] / 16.0;
      }
      const double ref = avg.value_or(mean);
      update_moving_average(avg, mean);
      adam_update(gamma, score_function_gradient(losses, ref, draws, prob), adam, 0.1);
    }
    CHECK(oracle::sigmoid(gamma[0]) > 0.99);
  }
  SECTION("shape check") {
    CHECK_THROWS_AS(score_function_gradient(std::vector<double>{1.0}, 0.0, std::vector<double>{1.0, 0.0, 1.0},
                                            std::vector<double>{0.5, 0.5}),
                    std::invalid_argument);
  }
}

TEST_CASE("mask evaluation", "[search]") {
  const auto& f = fixture();
  const std::size_t k = static_cast<std::size_t>(f.model.config.units());
  SECTION("zero mask never flips and leaves KL at exactly zero") {
    for (auto mode : {intervention::Mode::kSingleStep, intervention::Mode::kEveryStep}) {
      const auto ev = evaluate_mask(f.model, mode, std::vector<double>(k, 0.0), std::vector<double>(k, 0.3), f.eval);
      CHECK(ev.accuracy == 0.0);
      CHECK(ev.mean_kl == 0.0);
      CHECK(ev.instances == f.eval.size());
    }
  }
  SECTION("accuracy is the fraction of ratios below one") {
    std::vector<double> mask(k, 0.0), baseline(k, 0.0);
    for (std::size_t j = 0; j < k; j += 2) {
      mask[j] = 1.0;
      baseline[j] = j % 4 == 0 ? 0.9 : -0.9;
    }
    std::size_t flipped = 0;
    for (const auto& p : f.eval) {
      const auto out = intervention::forward_with_intervention(f.model, intervention::Mode::kEveryStep, mask, baseline,
                                                                p.encoded);
      flipped += ratio_loss(out.target_distribution, p.encoded.d, p.encoded.t) < 1.0;
    }
    const auto ev = evaluate_mask(f.model, intervention::Mode::kEveryStep, mask, baseline, f.eval);
    CHECK(ev.accuracy == static_cast<double>(flipped) / static_cast<double>(f.eval.size()));
    CHECK(ev.mean_kl > 0.0);
  }
  SECTION("empty set") {
    CHECK_THROWS_WITH(evaluate_mask(f.model, intervention::Mode::kSingleStep, std::vector<double>(k, 0.0),
                                    std::vector<double>(k, 0.0), {}),
                      "empty evaluation set");
  }
}

TEST_CASE("run_search bookkeeping and determinism", "[search]") {
  const auto& f = fixture();
  const std::size_t k = static_cast<std::size_t>(f.model.config.units());
  for (auto estimator : {Estimator::kRelaxed, Estimator::kReinforce}) {
    SearchConfig config;
    config.epochs = 4;
    config.estimator = estimator;
    config.mode = intervention::Mode::kEveryStep;
    config.seed = 5;
    const auto a = run_search_prepared(f.model, f.train, f.eval, config);
    const auto b = run_search_prepared(f.model, f.train, f.eval, config);
    CHECK(to_json_line(a, false) == to_json_line(b, false));
    CHECK(a.total_units == k);
    CHECK(a.accuracy >= 0.0);
    CHECK(a.accuracy <= 1.0);
    CHECK(a.units.size() == a.baselines.size());
    for (int u : a.units) CHECK(static_cast<std::size_t>(u) < k);
    CHECK(a.degenerate == a.units.empty());
    CHECK(a.constraint_violated == (static_cast<double>(a.units.size()) > config.alpha * static_cast<double>(k)));
    CHECK(a.eval_instances == f.eval.size());
    CHECK(a.run_id == to_string(estimator) + "-every-to-plural-seed5");
    for (double b0 : a.baselines) {
      CHECK(b0 >= -1.0);
      CHECK(b0 <= 1.0);
    }
  }
}

TEST_CASE("run_search rejects a direction without instances", "[search]") {
  const auto& f = fixture();
  SearchConfig config;
  CHECK_THROWS_AS(run_search_prepared(f.model, {}, f.eval, config), std::invalid_argument);
}

TEST_CASE("final mask is the discretized Hard Concrete mask", "[search]") {
  SearchConfig config;
  SearchState state = SearchState::initial(6, config);
  state.params.mask.gamma = {-30.0, 30.0, 3.0, -3.0, 0.0, 10.0};
  const auto m = final_mask(state, Estimator::kRelaxed);
  CHECK(m == hard_concrete::discretize(state.params.mask));
  CHECK(m[0] == 0);
  CHECK(m[1] == 1);
  state.params.mask.gamma = {-1.0, 1.0, 0.0, 0.2, -0.2, 5.0};
  CHECK(final_mask(state, Estimator::kReinforce) == std::vector<int>{0, 1, 0, 1, 0, 1});
}

TEST_CASE("aggregation", "[search]") {
  SECTION("one run") {
    const std::vector<SearchResult> runs{fake_result({3, 7}, {0.5, -1.0})};
    const auto agg = aggregate_runs(runs);
    REQUIRE(agg.units.size() == 2);
    for (const auto& u : agg.units) CHECK(u.prevalence == 1.0);
    CHECK(agg.accuracy_mean == 0.9);
    CHECK(agg.units_mean == 2.0);
  }
  SECTION("11 of 25 runs") {
    std::vector<SearchResult> runs;
    for (int r = 0; r < 25; ++r) runs.push_back(r < 11 ? fake_result({4, 9}, {1.0, 0.0}) : fake_result({9}, {0.0}));
    const auto agg = aggregate_runs(runs);
    REQUIRE(agg.units.size() == 2);
    CHECK(agg.units[0].unit == 9);
    CHECK(agg.units[0].prevalence == 1.0);
    CHECK(agg.units[1].unit == 4);
    CHECK(agg.units[1].runs == 11);
    CHECK(agg.units[1].prevalence == Catch::Approx(0.44));
  }
  SECTION("disjoint runs") {
    const std::vector<SearchResult> runs{fake_result({1, 2}, {0.2, 0.4}, 0.8), fake_result({3}, {-0.6}, 1.0)};
    const auto agg = aggregate_runs(runs);
    for (const auto& u : agg.units) CHECK(u.prevalence == 0.5);
    CHECK(agg.accuracy_mean == Catch::Approx(0.9));
    CHECK(agg.accuracy_std == Catch::Approx(0.1));
    CHECK(agg.units_std == Catch::Approx(0.5));
  }
  SECTION("baseline statistics") {
    const std::vector<SearchResult> runs{fake_result({5}, {1.0}), fake_result({5}, {-1.0})};
    const auto agg = aggregate_runs(runs);
    CHECK(agg.units[0].baseline_mean == 0.0);
    CHECK(agg.units[0].baseline_std == 1.0);
  }
  SECTION("empty") { CHECK_THROWS_AS(aggregate_runs({}), std::invalid_argument); }
}

TEST_CASE("result records round trip", "[search]") {
  SearchResult r = fake_result({2, 11}, {0.25, -0.75}, 0.85);
  r.run_id = "relaxed-single-to-plural-seed3";
  r.config.seed = 3;
  r.config.kl_weight = 0.0;
  r.mean_kl = 0.0123;
  r.steps = 120;
  r.seconds = 4.5;
  const std::string line = to_json_line(r);
  const auto back = from_json_line(line);
  CHECK(to_json_line(back) == line);
  CHECK(back.units == r.units);
  CHECK(back.config.kl_weight == 0.0);
  const auto j = nlohmann::json::parse(to_json_line(r, false));
  CHECK_FALSE(j.contains("seconds"));
  CHECK(nlohmann::json::parse(line).contains("seconds"));
  SearchResult empty = fake_result({}, {});
  empty.degenerate = true;
  CHECK(nlohmann::json::parse(to_json_line(empty)).at("flag") == "degenerate (empty mask)");
  CHECK_THROWS_AS(from_json_line("{not json"), std::invalid_argument);
}
