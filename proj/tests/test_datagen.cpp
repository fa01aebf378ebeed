#include "neuroflip/datagen.hpp"
#include "oracles.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace neuroflip::datagen;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "neuroflip_datagen_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string joined(const SentenceInstance& inst) { return inst.text(); }

}  // namespace

TEST_CASE("agreement corpus defaults", "[datagen]") {
  const Split split = generate_agreement_corpus(1);
  CHECK(split.train.size() == 11000);
  CHECK(split.eval.size() == 1000);

  const oracle::AgreementRules rules;
  std::size_t invalid = 0, plural = 0, library_rejects = 0;
  std::set<std::string> train_text;
  for (const auto& inst : split.train) train_text.insert(joined(inst));
  for (const auto* part : {&split.train, &split.eval}) {
    for (const auto& inst : *part) {
      if (!rules.valid(inst.tokens, inst.intervention_position, inst.target_position, inst.d, inst.t, inst.attribute)) {
        ++invalid;
      }
      if (!validate_agreement(inst).empty()) ++library_rejects;
      if (inst.attribute == "plural") ++plural;
      CHECK(inst.task == Task::kAgreement);
    }
  }
  CHECK(invalid == 0);
  CHECK(library_rejects == 0);
  // Balanced within 1%.
  const double frac = static_cast<double>(plural) / 12000.0;
  CHECK(std::abs(frac - 0.5) <= 0.01);
  std::size_t leaked = 0;
  for (const auto& inst : split.eval) leaked += train_text.count(joined(inst));
  CHECK(leaked == 0);
}

TEST_CASE("one main verb, subject before it", "[datagen]") {
  const Split split = generate_agreement_corpus(3, 300, 50);
  const oracle::AgreementRules rules;
  for (const auto& inst : split.train) {
    std::size_t verbs = 0;
    for (const auto& tok : inst.tokens) verbs += (rules.bare_verb(tok) || rules.third_person_verb(tok)) ? 1 : 0;
    CHECK(verbs == 1);
    CHECK(inst.intervention_position < inst.target_position);
    CHECK(inst.d != inst.t);
    // At least one attractor noun sits between subject and verb.
    bool attractor = false;
    for (std::size_t p = inst.intervention_position; p + 1 < inst.target_position; ++p) {
      attractor = attractor || inst.tokens[p] == "the";
    }
    CHECK(attractor);
  }
}

TEST_CASE("generation is a pure function of the seed", "[datagen]") {
  CHECK(generate_agreement_corpus(7, 500, 50).train == generate_agreement_corpus(7, 500, 50).train);
  CHECK(generate_agreement_corpus(7, 500, 50).eval == generate_agreement_corpus(7, 500, 50).eval);
  CHECK_FALSE(generate_agreement_corpus(7, 500, 50).train == generate_agreement_corpus(8, 500, 50).train);
  CHECK(generate_gender_corpus(7).train == generate_gender_corpus(7).train);
  CHECK(generate_gender_corpus(7).eval == generate_gender_corpus(7).eval);
}

TEST_CASE("minimal pairs", "[datagen]") {
  const auto pools = LexiconPools::standard();
  const Split split = generate_agreement_corpus(11, 200, 20);
  const oracle::AgreementRules rules;
  for (const auto& inst : split.train) {
    const SentenceInstance flipped = agreement_counterpart(inst, pools);
    CHECK(flipped.attribute != inst.attribute);
    CHECK(flipped.d == inst.t);
    CHECK(flipped.t == inst.d);
    CHECK(rules.valid(flipped.tokens, flipped.intervention_position, flipped.target_position, flipped.d, flipped.t,
                      flipped.attribute));
    // Only the subject and the verb change.
    std::size_t differences = 0;
    for (std::size_t p = 0; p < inst.tokens.size(); ++p) differences += inst.tokens[p] != flipped.tokens[p];
    CHECK(differences == 2);
    CHECK(agreement_counterpart(flipped, pools) == inst);
  }
}

TEST_CASE("lexicon pool sizes", "[datagen]") {
  const auto p = LexiconPools::standard();
  CHECK(p.nouns.size() == 20);
  CHECK(p.verbs.size() == 15);
  CHECK(p.adverbs.size() == 10);
  CHECK(p.prepositions.size() == 5);
  CHECK(p.proper_nouns.size() == 10);
  CHECK(p.locations.size() == 10);
  for (const auto& n : p.nouns) CHECK((!n.singular.empty() && !n.plural.empty()));
}

TEST_CASE("agreement generator errors", "[datagen]") {
  AgreementConfig small;
  small.pools.nouns.resize(1);
  small.pools.verbs.resize(1);
  small.sentence_template = "the {subject} {verb} .";
  CHECK_THROWS_AS(generate_agreement_corpus(1, 100, 10, small), GenerationError);
  AgreementConfig backwards;
  backwards.sentence_template = "{verb} the {subject} .";
  CHECK_THROWS_AS(generate_agreement_corpus(1, 10, 1, backwards), GenerationError);
  CHECK_THROWS_AS(generate_agreement_corpus(1, 0, 1), GenerationError);
}

TEST_CASE("gender corpus", "[datagen]") {
  const auto cfg = GenderConfig::standard();
  CHECK(cfg.templates.size() == 17);
  CHECK(cfg.occupations.size() == 169);
  const Split split = generate_gender_corpus(1);
  CHECK(split.train.size() == 2673);
  CHECK(split.eval.size() == 200);
  CHECK(split.train.size() + split.eval.size() == 2873);

  std::map<std::string, std::pair<int, int>> per_occupation;  // he, she
  std::set<std::string> seen;
  for (const auto* part : {&split.train, &split.eval}) {
    for (const auto& inst : *part) {
      CHECK(validate_gender(inst).empty());
      const std::string& pronoun = inst.tokens[inst.target_position - 1];
      REQUIRE((pronoun == "he" || pronoun == "she"));
      CHECK(inst.d == pronoun);
      CHECK(inst.intervention_position < inst.target_position);
      auto& counts = per_occupation[inst.tokens[inst.intervention_position - 1]];
      (pronoun == "he" ? counts.first : counts.second)++;
      seen.insert(inst.text());
    }
  }
  CHECK(seen.size() == 2873);
  CHECK(per_occupation.size() == 169);
  // Leans are split between the two pronouns.
  int male = 0, female = 0;
  for (const auto& [occ, c] : per_occupation) (c.first > c.second ? male : female)++;
  CHECK(std::abs(male - female) <= 20);
}

TEST_CASE("gender generator errors", "[datagen]") {
  GenderConfig cfg = GenderConfig::standard();
  cfg.templates = {"the {occupation} left because ."};
  CHECK_THROWS_AS(generate_gender_corpus(1, 100, 10, cfg), GenerationError);
  GenderConfig biased = GenderConfig::standard();
  biased.bias = 0.3;
  CHECK_THROWS_AS(generate_gender_corpus(1, 100, 10, biased), GenerationError);
  CHECK_THROWS_AS(generate_gender_corpus(1, 3000, 10), GenerationError);
}

TEST_CASE("corpus files", "[datagen]") {
  const Split split = generate_agreement_corpus(5, 40, 5);
  const Split gender = generate_gender_corpus(5, 30, 5);
  SECTION("round trip is lossless") {
    const fs::path p = temp_path("rt.tsv");
    write_corpus(p, split.train);
    CHECK(read_corpus(p) == split.train);
    write_corpus(p, gender.train);
    CHECK(read_corpus(p) == gender.train);
  }
  SECTION("empty file") {
    const fs::path p = temp_path("empty.tsv");
    std::ofstream(p).close();
    CHECK(read_corpus(p).empty());
  }
  SECTION("missing column names the column and the line") {
    const fs::path p = temp_path("short.tsv");
    {
      std::ofstream out(p);
      out << format_instance(split.train[0]) << "\n";
      std::string line = format_instance(split.train[1]);
      line = line.substr(0, line.rfind('\t'));
      out << line << "\n";
    }
    try {
      read_corpus(p);
      FAIL("short line accepted");
    } catch (const CorpusFormatError& e) {
      CHECK(e.line() == 2);
      CHECK(std::string(e.what()).find("attribute") != std::string::npos);
    }
  }
  SECTION("positions must be ordered") {
    std::string line = format_instance(split.train[0]);
    const auto first = line.find('\t');
    const auto second = line.find('\t', first + 1);
    line.replace(first + 1, second - first - 1, "99");
    CHECK_THROWS_AS(parse_instance(line, 1), CorpusFormatError);
  }
}
