#include "manifest.hpp"

#include <json.hpp>

#include <fstream>

namespace neuroflip::cli {

namespace {

using Json = nlohmann::ordered_json;

template <typename T>
void read_optional(const Json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

void Manifest::validate() const {
  if (repeats < 1) throw UsageError("manifest: repeats must be at least 1");
  if (lm.seeds.empty()) throw UsageError("manifest: lm.seeds must not be empty");
  if (compare_alphas.empty()) throw UsageError("manifest: compare.alphas must not be empty");
  try {
    search.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (!search::direction_matches_task(task, search.direction)) {
    throw UsageError("direction '" + search.direction + "' does not apply to task " + datagen::to_string(task));
  }
}

Manifest default_manifest() {
  Manifest m;
  m.validate();
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw UsageError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }

  Manifest m;
  m.source = path;
  const std::filesystem::path base = path.parent_path();
  try {
    if (j.contains("task")) m.task = datagen::task_from_string(j.at("task").get<std::string>());
    if (m.task == datagen::Task::kGender) m.search.direction = "to-he";
    const Json paths = j.contains("paths") ? j.at("paths") : Json::object();
    auto path_of = [&](const char* key, const std::filesystem::path& fallback) {
      return resolve(base, paths.contains(key) ? paths.at(key).get<std::string>() : fallback.string());
    };
    m.corpus_dir = path_of("corpus_dir", m.corpus_dir);
    m.checkpoint = path_of("checkpoint", m.checkpoint);
    m.results_dir = path_of("results_dir", m.results_dir);
    if (j.contains("data")) {
      const Json& d = j.at("data");
      read_optional(d, "seed", m.data.seed);
      read_optional(d, "n_train", m.data.n_train);
      read_optional(d, "n_eval", m.data.n_eval);
    }
    if (j.contains("lm")) {
      const Json& l = j.at("lm");
      read_optional(l, "hidden_size", m.lm.hidden_size);
      read_optional(l, "embedding_size", m.lm.embedding_size);
      read_optional(l, "learning_rate", m.lm.train.learning_rate);
      read_optional(l, "epochs", m.lm.train.epochs);
      read_optional(l, "batch_size", m.lm.train.batch_size);
      read_optional(l, "clip_norm", m.lm.train.clip_norm);
      read_optional(l, "seeds", m.lm.seeds);
    }
    if (j.contains("search")) {
      const Json& s = j.at("search");
      auto& c = m.search;
      read_optional(s, "alpha", c.alpha);
      read_optional(s, "beta", c.beta);
      read_optional(s, "lambda_init", c.lambda_init);
      read_optional(s, "learning_rate", c.learning_rate);
      read_optional(s, "lambda_learning_rate", c.lambda_learning_rate);
      read_optional(s, "kl_weight", c.kl_weight);
      read_optional(s, "epochs", c.epochs);
      read_optional(s, "batch_size", c.batch_size);
      read_optional(s, "max_train", c.max_train);
      read_optional(s, "seed", c.seed);
      read_optional(s, "direction", c.direction);
      read_optional(s, "patience", c.patience);
      read_optional(s, "accuracy_tolerance", c.accuracy_tolerance);
      read_optional(s, "c0_tolerance", c.c0_tolerance);
      read_optional(s, "freeze_lambda", c.freeze_lambda);
      if (s.contains("mode")) c.mode = intervention::mode_from_string(s.at("mode").get<std::string>());
      if (s.contains("estimator")) c.estimator = search::estimator_from_string(s.at("estimator").get<std::string>());
    }
    read_optional(j, "repeats", m.repeats);
    if (j.contains("compare")) read_optional(j.at("compare"), "alphas", m.compare_alphas);
  } catch (const Json::exception& e) {
    throw UsageError("manifest " + path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError("manifest " + path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

std::string manifest_to_json(const Manifest& m) {
  Json j{{"task", datagen::to_string(m.task)},
         {"paths",
          {{"corpus_dir", m.corpus_dir.string()},
           {"checkpoint", m.checkpoint.string()},
           {"results_dir", m.results_dir.string()}}},
         {"data", {{"seed", m.data.seed}, {"n_train", m.data.n_train}, {"n_eval", m.data.n_eval}}},
         {"lm",
          {{"hidden_size", m.lm.hidden_size},
           {"embedding_size", m.lm.embedding_size},
           {"learning_rate", m.lm.train.learning_rate},
           {"epochs", m.lm.train.epochs},
           {"batch_size", m.lm.train.batch_size},
           {"clip_norm", m.lm.train.clip_norm},
           {"seeds", m.lm.seeds}}},
         {"search", Json::parse(search::config_to_json(m.search))},
         {"repeats", m.repeats},
         {"compare", {{"alphas", m.compare_alphas}}}};
  return j.dump(2);
}

}  // namespace neuroflip::cli
