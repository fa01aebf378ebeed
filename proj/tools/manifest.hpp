#pragma once

// Experiment manifest: one JSON file naming the corpus, checkpoint and
// results locations plus every hyperparameter a command needs. Relative
// paths resolve against the manifest's directory.

#include "neuroflip/datagen.hpp"
#include "neuroflip/lstm_lm.hpp"
#include "neuroflip/search.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuroflip::cli {

/// Bad flags or manifest content. Maps to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or malformed input files. Maps to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::uint64_t seed = 1;
  std::size_t n_train = 0;  // 0 selects the task default
  std::size_t n_eval = 0;
};

struct LMSection {
  int hidden_size = 64;
  int embedding_size = 64;
  lm::TrainOptions train;
  std::vector<std::uint64_t> seeds{1};
};

struct Manifest {
  std::filesystem::path source;  // the manifest file, empty when defaulted
  datagen::Task task = datagen::Task::kAgreement;
  std::filesystem::path corpus_dir = "data";
  std::filesystem::path checkpoint = "lm.ckpt";
  std::filesystem::path results_dir = "results";
  DataSection data;
  LMSection lm;
  search::SearchConfig search;
  int repeats = 1;
  std::vector<double> compare_alphas{0.02};

  std::filesystem::path train_corpus() const { return corpus_dir / "train.tsv"; }
  std::filesystem::path eval_corpus() const { return corpus_dir / "eval.tsv"; }
  void validate() const;
};

/// Throws DataError if the file cannot be read and UsageError for invalid
/// content.
Manifest load_manifest(const std::filesystem::path& path);
/// Defaults with relative paths under the working directory.
Manifest default_manifest();
std::string manifest_to_json(const Manifest& manifest);

}  // namespace neuroflip::cli
