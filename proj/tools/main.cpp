#include "commands.hpp"

#include "neuroflip/lstm_lm.hpp"
#include "neuroflip/runtime.hpp"
#include "neuroflip/search.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>

namespace {

using neuroflip::cli::Options;

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--manifest", o.manifest, "experiment manifest (JSON)");
  cmd->add_option("--out", o.out, "output file or directory");
  cmd->add_option("--seed", o.seed, "random seed");
  cmd->add_option("--task", o.task, "agreement or gender")->check(CLI::IsMember({"agreement", "gender"}));
}

void add_search(CLI::App* cmd, Options& o) {
  cmd->add_option("--repeats", o.repeats, "runs per LM seed")->check(CLI::PositiveNumber);
  cmd->add_option("--mode", o.mode, "single or every")->check(CLI::IsMember({"single", "every"}));
  cmd->add_option("--direction", o.direction, "to-singular, to-plural, to-he or to-she")
      ->check(CLI::IsMember({"to-singular", "to-plural", "to-he", "to-she"}));
  cmd->add_option("--alpha", o.alpha, "unit budget as a fraction of k");
  cmd->add_option("--beta", o.beta, "interior-mass budget as a fraction of k");
  cmd->add_option("--kl-weight", o.kl_weight, "weight of the KL retention term");
  cmd->add_option("--estimator", o.estimator, "relaxed or reinforce")->check(CLI::IsMember({"relaxed", "reinforce"}));
}

void add_record(CLI::App* cmd, Options& o) {
  cmd->add_option("--checkpoint", o.checkpoint, "LM checkpoint (default: from the manifest)");
  cmd->add_option("--result", o.result, "JSON-lines results file");
  cmd->add_option("--record", o.record, "record index within --result");
}

}  // namespace

int main(int argc, char** argv) {
  neuroflip::tune_allocator();

  CLI::App app{"neuroflip: sparse hidden-unit interventions on a small recurrent LM"};
  app.require_subcommand(1);
  Options o;
  std::function<int(const Options&, std::ostream&)> action;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic train/eval corpora");
  add_common(gen, o);
  gen->callback([&] { action = neuroflip::cli::cmd_gen_data; });

  auto* train = app.add_subcommand("train-lm", "train the language model(s) named by the manifest");
  add_common(train, o);
  train->add_option("--epochs", o.epochs, "training epochs")->check(CLI::PositiveNumber);
  train->callback([&] { action = neuroflip::cli::cmd_train_lm; });

  auto* find = app.add_subcommand("find-units", "search for a sparse unit set that flips the decision");
  add_common(find, o);
  add_search(find, o);
  find->add_option("--checkpoint", o.checkpoint, "LM checkpoint (default: one per manifest LM seed)");
  find->callback([&] { action = neuroflip::cli::cmd_find_units; });

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a stored unit set or a zero/full mask");
  add_common(evaluate, o);
  add_search(evaluate, o);
  add_record(evaluate, o);
  evaluate->add_option("--mask", o.mask, "zero or full instead of a stored record")
      ->check(CLI::IsMember({"zero", "full"}));
  evaluate->callback([&] { action = neuroflip::cli::cmd_evaluate; });

  auto* trace = app.add_subcommand("trace", "per-step hidden values before and after the intervention");
  add_common(trace, o);
  add_search(trace, o);
  add_record(trace, o);
  trace->add_option("--mask", o.mask, "zero instead of a stored record")->check(CLI::IsMember({"zero"}));
  trace->add_option("--instance", o.instance, "index into the evaluation corpus");
  trace->add_option("--units", o.units, "units to report (default: the record's units)");
  trace->callback([&] { action = neuroflip::cli::cmd_trace; });

  auto* compare = app.add_subcommand("compare-estimators", "relaxed vs REINFORCE under identical seeds");
  add_common(compare, o);
  add_search(compare, o);
  compare->add_option("--checkpoint", o.checkpoint, "LM checkpoint");
  compare->add_option("--alphas", o.alphas, "unit budgets to compare");
  compare->callback([&] { action = neuroflip::cli::cmd_compare_estimators; });

  auto* report = app.add_subcommand("report", "summarise result files as TSV tables");
  add_common(report, o);
  report->add_option("--results", o.results, "JSON-lines results files");
  report->callback([&] { action = neuroflip::cli::cmd_report; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return action(o, std::cout);
  } catch (const neuroflip::cli::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const neuroflip::cli::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const neuroflip::search::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const neuroflip::lm::TrainingDiverged& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
