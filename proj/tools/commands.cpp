#include "commands.hpp"

#include "neuroflip/fileio.hpp"

#include <json.hpp>

#include <chrono>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace neuroflip::cli {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::vector<datagen::SentenceInstance> load_corpus(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("corpus file not found: " + path.string());
  try {
    return datagen::read_corpus(path);
  } catch (const datagen::CorpusFormatError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

lm::LanguageModel load_model(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
  try {
    return lm::load_checkpoint(path);
  } catch (const lm::CheckpointError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void require_compatible(const lm::Vocabulary& vocab, const std::vector<datagen::SentenceInstance>& corpus,
                        const fs::path& checkpoint) {
  for (const auto& inst : corpus) {
    for (const auto& tok : inst.tokens) {
      if (!vocab.find(tok)) {
        throw DataError("corpus and checkpoint " + checkpoint.string() + " have incompatible vocabularies: '" + tok +
                        "' is unknown to the model");
      }
    }
  }
}

std::vector<search::PreparedInstance> prepare(const lm::LanguageModel& model,
                                              const std::vector<datagen::SentenceInstance>& corpus,
                                              const std::string& direction) {
  try {
    return search::prepare_instances(model, corpus, direction);
  } catch (const lm::VocabularyError& e) {
    throw DataError(e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
}

search::SearchResult run(const lm::LanguageModel& model, std::vector<search::PreparedInstance> train,
                         const std::vector<search::PreparedInstance>& eval, const search::SearchConfig& config) {
  try {
    return search::run_search_prepared(model, std::move(train), eval, config);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
}

std::vector<search::SearchResult> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read results file " + path.string());
  std::vector<search::SearchResult> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      out.push_back(search::from_json_line(line));
    } catch (const std::invalid_argument& e) {
      throw DataError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

search::SearchResult read_record(const fs::path& path, std::size_t index) {
  const auto records = read_results(path);
  if (index >= records.size()) {
    throw DataError("record " + std::to_string(index) + " out of range: " + path.string() + " holds " +
                    std::to_string(records.size()));
  }
  return records[index];
}

fs::path output_dir(const Options& options, const Manifest& manifest) {
  return options.out ? fs::path(*options.out) : manifest.results_dir;
}

std::string join_lines(const std::vector<search::SearchResult>& results) {
  std::string out;
  for (const auto& r : results) out += search::to_json_line(r) + "\n";
  return out;
}

Json aggregate_json(const search::Aggregate& agg) {
  Json units = Json::array();
  for (const auto& u : agg.units) {
    units.push_back({{"unit", u.unit},
                     {"runs", u.runs},
                     {"prevalence", u.prevalence},
                     {"baseline_mean", u.baseline_mean},
                     {"baseline_std", u.baseline_std}});
  }
  return Json{{"runs", agg.runs},
              {"accuracy_mean", agg.accuracy_mean},
              {"accuracy_std", agg.accuracy_std},
              {"units_mean", agg.units_mean},
              {"units_std", agg.units_std},
              {"kl_mean", agg.kl_mean},
              {"kl_std", agg.kl_std},
              {"units", units}};
}

// Mask and baseline for a stored record: ones at its units, its baselines
// there, zeros elsewhere.
std::pair<std::vector<double>, std::vector<double>> record_mask(const search::SearchResult& r, std::size_t k) {
  std::vector<double> mask(k, 0.0), baseline(k, 0.0);
  for (std::size_t j = 0; j < r.units.size(); ++j) {
    const int u = r.units[j];
    if (u < 0 || static_cast<std::size_t>(u) >= k) {
      throw DataError("record unit " + std::to_string(u) + " outside the model's " + std::to_string(k) + " units");
    }
    mask[static_cast<std::size_t>(u)] = 1.0;
    baseline[static_cast<std::size_t>(u)] = r.baselines[j];
  }
  return {mask, baseline};
}

std::string fixed(double v, int precision = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

}  // namespace

Manifest resolve_manifest(const Options& o) {
  Manifest m = o.manifest ? load_manifest(*o.manifest) : default_manifest();
  try {
    if (o.task) {
      m.task = datagen::task_from_string(*o.task);
      if (!o.direction && !search::direction_matches_task(m.task, m.search.direction)) {
        m.search.direction = m.task == datagen::Task::kGender ? "to-he" : "to-plural";
      }
    }
    if (o.mode) m.search.mode = intervention::mode_from_string(*o.mode);
    if (o.estimator) m.search.estimator = search::estimator_from_string(*o.estimator);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (o.direction) m.search.direction = *o.direction;
  if (o.alpha) m.search.alpha = *o.alpha;
  if (o.beta) m.search.beta = *o.beta;
  if (o.kl_weight) m.search.kl_weight = *o.kl_weight;
  if (o.repeats) m.repeats = *o.repeats;
  if (!o.alphas.empty()) m.compare_alphas = o.alphas;
  m.validate();
  return m;
}

fs::path checkpoint_for_seed(const Manifest& manifest, std::uint64_t seed) {
  if (manifest.lm.seeds.size() == 1) return manifest.checkpoint;
  fs::path p = manifest.checkpoint;
  const std::string ext = p.extension().string();
  p.replace_filename(p.stem().string() + ".seed" + std::to_string(seed) + ext);
  return p;
}

// --- gen-data -----------------------------------------------------------------------

int cmd_gen_data(const Options& o, std::ostream& log) {
  const Manifest m = resolve_manifest(o);
  const std::uint64_t seed = o.seed.value_or(m.data.seed);
  const fs::path dir = o.out ? fs::path(*o.out) : m.corpus_dir;
  datagen::Split split;
  try {
    if (m.task == datagen::Task::kAgreement) {
      split = datagen::generate_agreement_corpus(seed, m.data.n_train ? m.data.n_train : 11000,
                                                 m.data.n_eval ? m.data.n_eval : 1000);
    } else {
      split = datagen::generate_gender_corpus(seed, m.data.n_train ? m.data.n_train : 2673,
                                              m.data.n_eval ? m.data.n_eval : 200);
    }
  } catch (const datagen::GenerationError& e) {
    throw DataError(e.what());
  }
  std::size_t invalid = 0;
  for (const auto* part : {&split.train, &split.eval}) {
    for (const auto& inst : *part) {
      const std::string why =
          m.task == datagen::Task::kAgreement ? datagen::validate_agreement(inst) : datagen::validate_gender(inst);
      if (!why.empty()) ++invalid;
    }
  }
  if (invalid > 0) throw DataError(std::to_string(invalid) + " generated instances failed validation");
  datagen::write_corpus(dir / "train.tsv", split.train);
  datagen::write_corpus(dir / "eval.tsv", split.eval);
  log << "task\t" << datagen::to_string(m.task) << "\nseed\t" << seed << "\ntrain\t" << split.train.size()
      << "\neval\t" << split.eval.size() << "\ntotal\t" << split.train.size() + split.eval.size()
      << "\ninvalid\t0\nout\t" << dir.string() << "\n";
  return 0;
}

// --- train-lm -----------------------------------------------------------------------

int cmd_train_lm(const Options& o, std::ostream& log) {
  Manifest m = resolve_manifest(o);
  if (o.seed) m.lm.seeds = {*o.seed};
  if (o.epochs) m.lm.train.epochs = *o.epochs;
  if (o.out && m.lm.seeds.size() > 1) throw UsageError("--out needs a single LM seed (use --seed)");

  const auto train = load_corpus(m.train_corpus());
  const auto eval = load_corpus(m.eval_corpus());
  if (train.empty()) throw DataError("training corpus is empty: " + m.train_corpus().string());
  std::vector<datagen::SentenceInstance> all = train;
  all.insert(all.end(), eval.begin(), eval.end());

  for (std::uint64_t seed : m.lm.seeds) {
    lm::LanguageModel model;
    model.vocab = lm::Vocabulary::from_corpus(all);
    model.config.hidden_size = m.lm.hidden_size;
    model.config.embedding_size = m.lm.embedding_size;
    model.config.vocab_size = model.vocab.size();
    try {
      model.config.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    std::vector<std::vector<int>> sequences;
    for (const auto& inst : train) sequences.push_back(lm::training_sequence(model.vocab, inst));

    lm::TrainOptions options = m.lm.train;
    options.seed = seed;
    const auto start = std::chrono::steady_clock::now();
    lm::TrainResult trained = lm::train_lm(model.config, sequences, options, [&](int epoch, double loss) {
      log << "seed " << seed << " epoch " << epoch << " loss " << fixed(loss, 5) << "\n" << std::flush;
    });
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    model.params = std::move(trained.params);

    const fs::path path = o.out ? fs::path(*o.out) : checkpoint_for_seed(m, seed);
    lm::save_checkpoint(path, model);
    Json metrics{{"seed", seed},
                 {"task", datagen::to_string(m.task)},
                 {"epochs", options.epochs},
                 {"learning_rate", options.learning_rate},
                 {"epoch_loss", trained.epoch_loss}};
    if (!eval.empty()) {
      const auto encoded = lm::encode_all(model.vocab, eval);
      metrics["eval_accuracy"] = lm::agreement_accuracy(model, encoded);
    }
    metrics["seconds"] = seconds;
    write_file_atomic(fs::path(path.string() + ".metrics.json"), metrics.dump(2) + "\n");
    log << "checkpoint\t" << path.string() << "\n";
    if (metrics.contains("eval_accuracy")) log << "eval_accuracy\t" << fixed(metrics["eval_accuracy"].get<double>()) << "\n";
  }
  return 0;
}

// --- find-units ---------------------------------------------------------------------

int cmd_find_units(const Options& o, std::ostream& log) {
  const Manifest m = resolve_manifest(o);
  const auto train = load_corpus(m.train_corpus());
  const auto eval = load_corpus(m.eval_corpus());
  std::vector<std::pair<std::uint64_t, fs::path>> checkpoints;
  if (o.checkpoint) {
    checkpoints.emplace_back(m.lm.seeds.front(), *o.checkpoint);
  } else {
    for (std::uint64_t s : m.lm.seeds) checkpoints.emplace_back(s, checkpoint_for_seed(m, s));
  }

  const std::uint64_t base_seed = o.seed.value_or(m.search.seed);
  std::vector<search::SearchResult> results;
  for (const auto& [lm_seed, path] : checkpoints) {
    const lm::LanguageModel model = load_model(path);
    require_compatible(model.vocab, train, path);
    require_compatible(model.vocab, eval, path);
    const auto train_set = prepare(model, train, m.search.direction);
    const auto eval_set = prepare(model, eval, m.search.direction);
    for (int r = 0; r < m.repeats; ++r) {
      search::SearchConfig config = m.search;
      config.seed = base_seed + static_cast<std::uint64_t>(r);
      search::SearchResult result = run(model, train_set, eval_set, config);
      result.run_id = "lm" + std::to_string(lm_seed) + "-" + result.run_id;
      log << result.run_id << "\taccuracy " << fixed(result.accuracy) << "\tunits " << result.units.size()
          << "\tkl " << fixed(result.mean_kl, 5) << "\tepochs " << result.epochs_run
          << (result.degenerate ? "\tdegenerate (empty mask)" : "") << "\n"
          << std::flush;
      results.push_back(std::move(result));
    }
  }

  const fs::path dir = output_dir(o, m);
  const search::Aggregate agg = search::aggregate_runs(results);
  write_file_atomic(dir / "results.jsonl", join_lines(results));
  write_file_atomic(dir / "aggregate.tsv", search::aggregate_tsv(agg));
  write_file_atomic(dir / "aggregate.json", aggregate_json(agg).dump(2) + "\n");
  log << "runs\t" << agg.runs << "\naccuracy\t" << fixed(agg.accuracy_mean) << " +- " << fixed(agg.accuracy_std)
      << "\nunits\t" << fixed(agg.units_mean, 2) << " +- " << fixed(agg.units_std, 2) << "\nkl\t"
      << fixed(agg.kl_mean, 5) << " +- " << fixed(agg.kl_std, 5) << "\nout\t" << dir.string() << "\n";
  return 0;
}

// --- evaluate -----------------------------------------------------------------------

int cmd_evaluate(const Options& o, std::ostream& log) {
  const Manifest m = resolve_manifest(o);
  if (!o.result && !o.mask) throw UsageError("evaluate needs --result or --mask {zero,full}");
  if (o.mask && *o.mask != "zero" && *o.mask != "full") throw UsageError("--mask must be zero or full");

  const fs::path path = o.checkpoint ? fs::path(*o.checkpoint) : checkpoint_for_seed(m, m.lm.seeds.front());
  const lm::LanguageModel model = load_model(path);
  const auto eval = load_corpus(m.eval_corpus());
  require_compatible(model.vocab, eval, path);
  const auto k = static_cast<std::size_t>(model.config.units());

  search::SearchConfig config = m.search;
  std::vector<double> mask(k, 0.0), baseline(k, 0.0);
  std::string source;
  if (o.result) {
    const auto record = read_record(*o.result, o.record);
    config.mode = record.config.mode;
    config.direction = record.config.direction;
    config.alpha = record.config.alpha;
    std::tie(mask, baseline) = record_mask(record, k);
    source = record.run_id;
  } else {
    if (*o.mask == "full") mask.assign(k, 1.0);
    source = *o.mask + "-mask";
  }
  if (o.mode) config.mode = intervention::mode_from_string(*o.mode);
  if (o.direction) config.direction = *o.direction;
  const auto instances = prepare(model, eval, config.direction);
  if (instances.empty()) throw DataError("no evaluation instances for direction " + config.direction);
  const auto ev = search::evaluate_mask(model, config.mode, mask, baseline, instances);

  std::size_t units = 0;
  for (double v : mask) units += v != 0.0 ? 1 : 0;
  Json out{{"source", source},
           {"mode", intervention::to_string(config.mode)},
           {"direction", config.direction},
           {"units", units},
           {"accuracy", ev.accuracy},
           {"mean_kl", ev.mean_kl},
           {"instances", ev.instances},
           {"constraint_violated", static_cast<double>(units) > config.alpha * static_cast<double>(k)}};
  const std::string line = out.dump();
  if (o.out) write_file_atomic(*o.out, line + "\n");
  log << line << "\n";
  return 0;
}

// --- trace --------------------------------------------------------------------------

int cmd_trace(const Options& o, std::ostream& log) {
  const Manifest m = resolve_manifest(o);
  if (!o.result && !o.mask) throw UsageError("trace needs --result or --mask zero");
  if (o.mask && *o.mask != "zero") throw UsageError("trace accepts only --mask zero");
  const fs::path path = o.checkpoint ? fs::path(*o.checkpoint) : checkpoint_for_seed(m, m.lm.seeds.front());
  const lm::LanguageModel model = load_model(path);
  const auto eval = load_corpus(m.eval_corpus());
  const auto k = static_cast<std::size_t>(model.config.units());

  const std::size_t index = o.instance.value_or(0);
  if (index >= eval.size()) {
    throw DataError("instance index " + std::to_string(index) + " out of range: evaluation set holds " +
                    std::to_string(eval.size()));
  }
  std::vector<double> mask(k, 0.0), baseline(k, 0.0);
  std::vector<int> units = o.units;
  intervention::Mode mode = m.search.mode;
  if (o.result) {
    const auto record = read_record(*o.result, o.record);
    std::tie(mask, baseline) = record_mask(record, k);
    mode = record.config.mode;
    if (units.empty()) units = record.units;
  }
  if (o.mode) mode = intervention::mode_from_string(*o.mode);
  if (units.empty()) {
    for (std::size_t u = 0; u < k; ++u) units.push_back(static_cast<int>(u));
  }
  for (int u : units) {
    if (u < 0 || static_cast<std::size_t>(u) >= k) throw UsageError("--units entry " + std::to_string(u) + " out of range");
  }

  lm::EncodedInstance encoded;
  try {
    encoded = lm::encode(model.vocab, eval[index]);
  } catch (const lm::VocabularyError& e) {
    throw DataError(e.what());
  }
  const auto pair = search::assign_contrast(model, encoded);
  encoded.d = pair.d;
  encoded.t = pair.t;
  const auto output = intervention::forward_with_intervention(model, mode, mask, baseline, encoded);
  const fs::path out = o.out ? fs::path(*o.out) : m.results_dir / "trace.tsv";
  write_file_atomic(out, intervention::trace_tsv(output.trace, units, model.vocab));
  const auto& target = output.target_distribution;
  log << "sentence\t" << eval[index].text() << "\nd\t" << model.vocab.token(pair.d) << "\nt\t"
      << model.vocab.token(pair.t) << "\nratio\t" << search::ratio_loss(target, pair.d, pair.t) << "\nrows\t"
      << output.trace.tokens.size() * units.size() << "\nout\t" << out.string() << "\n";
  return 0;
}

// --- compare-estimators ---------------------------------------------------------------

int cmd_compare_estimators(const Options& o, std::ostream& log) {
  const Manifest m = resolve_manifest(o);
  const fs::path path = o.checkpoint ? fs::path(*o.checkpoint) : checkpoint_for_seed(m, m.lm.seeds.front());
  const lm::LanguageModel model = load_model(path);
  const auto train = load_corpus(m.train_corpus());
  const auto eval = load_corpus(m.eval_corpus());
  require_compatible(model.vocab, train, path);
  require_compatible(model.vocab, eval, path);
  const auto train_set = prepare(model, train, m.search.direction);
  const auto eval_set = prepare(model, eval, m.search.direction);

  const std::uint64_t base_seed = o.seed.value_or(m.search.seed);
  std::vector<search::SearchResult> results;
  std::ostringstream table;
  table << "alpha\testimator\tseed\taccuracy\tunits\tsteps\tepochs\tconverged\tseconds\n";
  for (double alpha : m.compare_alphas) {
    for (int r = 0; r < m.repeats; ++r) {
      for (auto estimator : {search::Estimator::kRelaxed, search::Estimator::kReinforce}) {
        search::SearchConfig config = m.search;
        config.alpha = alpha;
        config.estimator = estimator;
        config.seed = base_seed + static_cast<std::uint64_t>(r);
        search::SearchResult result = run(model, train_set, eval_set, config);
        result.run_id = "alpha" + fixed(alpha, 3) + "-" + result.run_id;
        table << alpha << '\t' << search::to_string(estimator) << '\t' << config.seed << '\t' << fixed(result.accuracy)
              << '\t' << result.units.size() << '\t' << result.steps << '\t' << result.epochs_run << '\t'
              << (result.converged ? 1 : 0) << '\t' << fixed(result.seconds, 3) << '\n';
        log << result.run_id << "\taccuracy " << fixed(result.accuracy) << "\tunits " << result.units.size()
            << "\tseconds " << fixed(result.seconds, 2) << "\n"
            << std::flush;
        results.push_back(std::move(result));
      }
    }
  }
  const fs::path dir = output_dir(o, m);
  write_file_atomic(dir / "compare.tsv", table.str());
  write_file_atomic(dir / "compare.jsonl", join_lines(results));
  log << "out\t" << dir.string() << "\n";
  return 0;
}

// --- report -------------------------------------------------------------------------

int cmd_report(const Options& o, std::ostream& log) {
  const Manifest m = resolve_manifest(o);
  std::vector<std::string> files = o.results;
  if (files.empty()) files.push_back((m.results_dir / "results.jsonl").string());
  std::map<std::string, std::vector<search::SearchResult>> groups;
  for (const auto& f : files) {
    for (auto& r : read_results(f)) {
      const std::string key = search::to_string(r.config.estimator) + "\t" + intervention::to_string(r.config.mode) +
                              "\t" + r.config.direction + "\t" + fixed(r.config.kl_weight, 2);
      groups[key].push_back(std::move(r));
    }
  }
  if (groups.empty()) throw DataError("no result records to report");

  std::ostringstream summary, prevalence;
  summary << "estimator\tmode\tdirection\tkl_weight\truns\taccuracy_mean\taccuracy_std\tunits_mean\tunits_std\tkl_mean"
             "\tkl_std\n";
  prevalence << "estimator\tmode\tdirection\tkl_weight\tunit\truns\tprevalence\tbaseline_mean\tbaseline_std\n";
  for (const auto& [key, results] : groups) {
    const auto agg = search::aggregate_runs(results);
    summary << key << '\t' << agg.runs << '\t' << fixed(agg.accuracy_mean) << '\t' << fixed(agg.accuracy_std) << '\t'
            << fixed(agg.units_mean, 2) << '\t' << fixed(agg.units_std, 2) << '\t' << fixed(agg.kl_mean, 5) << '\t'
            << fixed(agg.kl_std, 5) << '\n';
    for (const auto& u : agg.units) {
      prevalence << key << '\t' << u.unit << '\t' << u.runs << '\t' << fixed(u.prevalence, 3) << '\t'
                 << fixed(u.baseline_mean, 3) << '\t' << fixed(u.baseline_std, 3) << '\n';
    }
  }
  const fs::path dir = output_dir(o, m);
  write_file_atomic(dir / "report.tsv", summary.str());
  write_file_atomic(dir / "prevalence.tsv", prevalence.str());
  log << summary.str();
  return 0;
}

}  // namespace neuroflip::cli
