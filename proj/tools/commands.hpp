#pragma once

#include "manifest.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace neuroflip::cli {

/// Flag values shared by the subcommands; unset flags fall back to the
/// manifest.
struct Options {
  std::optional<std::string> manifest;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> repeats;
  std::optional<std::string> mode;
  std::optional<std::string> direction;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<double> kl_weight;
  std::optional<std::string> task;
  std::optional<std::string> estimator;
  std::optional<int> epochs;

  std::optional<std::string> checkpoint;
  std::optional<std::string> result;  // JSON-lines file
  std::size_t record = 0;             // line index within `result`
  std::optional<std::string> mask;    // "zero" or "full" instead of a record
  std::optional<std::size_t> instance;
  std::vector<int> units;
  std::vector<double> alphas;
  std::vector<std::string> results;
};

/// Manifest from --manifest (or defaults) with flag overrides applied.
Manifest resolve_manifest(const Options& options);

int cmd_gen_data(const Options& options, std::ostream& log);
int cmd_train_lm(const Options& options, std::ostream& log);
int cmd_find_units(const Options& options, std::ostream& log);
int cmd_evaluate(const Options& options, std::ostream& log);
int cmd_trace(const Options& options, std::ostream& log);
int cmd_compare_estimators(const Options& options, std::ostream& log);
int cmd_report(const Options& options, std::ostream& log);

/// Checkpoint path for one LM seed: the manifest path itself when only one
/// seed is listed, otherwise "<stem>.seed<N><ext>".
std::filesystem::path checkpoint_for_seed(const Manifest& manifest, std::uint64_t seed);

}  // namespace neuroflip::cli
