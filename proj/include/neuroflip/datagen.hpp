#pragma once

// Synthetic corpora for the two probing tasks.
//
// Agreement sentences follow one fixed template with a prepositional
// attractor between subject and verb. Gender sentences instantiate
// "the <occupation> <verb> because <pronoun> ..." templates. Every
// instance carries the 1-based position of the intervened token (the
// subject or occupation) and of the target token (the verb or pronoun),
// plus the contrast pair: `d` is the form that appears in the sentence and
// `t` its counterpart.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuroflip::datagen {

enum class Task { kAgreement, kGender };

std::string to_string(Task task);
Task task_from_string(const std::string& name);

struct SentenceInstance {
  std::vector<std::string> tokens;
  std::size_t intervention_position = 0;  // 1-based
  std::size_t target_position = 0;        // 1-based
  std::string d;
  std::string t;
  Task task = Task::kAgreement;
  // "singular" / "plural" for agreement; "male" / "female" for gender.
  std::string attribute;

  std::string text() const;
  friend bool operator==(const SentenceInstance&, const SentenceInstance&) = default;
};

struct Split {
  std::vector<SentenceInstance> train;
  std::vector<SentenceInstance> eval;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InflectedWord {
  std::string singular;
  std::string plural;
};

struct LexiconPools {
  std::vector<InflectedWord> nouns;      // subject / object nouns
  std::vector<InflectedWord> verbs;      // singular = 3rd person present
  std::vector<std::string> adverbs;
  std::vector<std::string> prepositions;
  std::vector<std::string> proper_nouns;
  std::vector<InflectedWord> locations;

  /// 20 nouns, 15 verbs, 10 adverbs, 5 prepositions, 10 proper nouns and
  /// 10 location nouns with regular inflection.
  static LexiconPools standard();
};

struct AgreementConfig {
  LexiconPools pools = LexiconPools::standard();
  // Slots: {subject} {verb} {preposition} {location} {adverb} {object} {name}.
  // {subject} and {verb} must each appear once, subject first.
  std::string sentence_template = "the {subject} {preposition} the {location} {adverb} {verb} the {object} .";
};

Split generate_agreement_corpus(std::uint64_t seed, std::size_t n_train = 11000, std::size_t n_eval = 1000,
                                const AgreementConfig& config = {});

/// The same sentence with subject number flipped and subject and verb
/// re-inflected; d and t swap.
SentenceInstance agreement_counterpart(const SentenceInstance& instance, const LexiconPools& pools);

struct GenderConfig {
  // Each template contains {occupation} and {pronoun}, occupation first.
  std::vector<std::string> templates;
  std::vector<std::string> occupations;
  // Probability of the occupation's favoured pronoun.
  double bias = 0.9;

  /// 17 templates and 169 occupations.
  static GenderConfig standard();
};

/// All template x occupation instances, shuffled and split. Occupations are
/// split evenly into male- and female-leaning ones and each sentence draws its
/// pronoun with probability `bias` for the favoured one, so a trained model
/// picks up an occupation-dependent preference.
Split generate_gender_corpus(std::uint64_t seed, std::size_t n_train = 2673, std::size_t n_eval = 200,
                             const GenderConfig& config = GenderConfig::standard());

/// Rule-based check that does not consult the generator's pools: regular
/// English morphology decides subject number and verb agreement. Returns
/// an empty string for a valid instance, otherwise the reason.
std::string validate_agreement(const SentenceInstance& instance);

/// Structural checks for gender instances (pronoun slot, pair, positions).
std::string validate_gender(const SentenceInstance& instance);

class CorpusFormatError : public std::runtime_error {
 public:
  CorpusFormatError(std::size_t line, const std::string& detail);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// One instance per line: tokens, i, n, d, t, task, attribute (tab separated).
void write_corpus(const std::filesystem::path& path, const std::vector<SentenceInstance>& corpus);
std::vector<SentenceInstance> read_corpus(const std::filesystem::path& path);

std::string format_instance(const SentenceInstance& instance);
SentenceInstance parse_instance(const std::string& line, std::size_t line_number);

}  // namespace neuroflip::datagen
