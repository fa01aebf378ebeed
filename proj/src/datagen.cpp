#include "neuroflip/datagen.hpp"

#include "neuroflip/fileio.hpp"
#include "neuroflip/random.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

namespace neuroflip::datagen {

namespace {

InflectedWord regular(const std::string& stem) { return {stem, stem + "s"}; }

InflectedWord regular_verb(const std::string& stem) { return {stem + "s", stem}; }

std::vector<std::string> split_tokens(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

bool ends_with_s(const std::string& word) { return !word.empty() && word.back() == 's'; }

constexpr std::array<const char*, 169> kOccupations = {
    "accountant",   "administrator", "advisor",      "aide",          "analyst",        "architect",
    "artist",       "assistant",     "astronaut",    "astronomer",    "athlete",        "attendant",
    "attorney",     "auditor",       "author",       "baker",         "banker",         "barber",
    "bartender",    "biologist",     "bookkeeper",   "builder",       "butcher",        "captain",
    "cardiologist", "caretaker",     "carpenter",    "cashier",       "chef",           "chemist",
    "choreographer", "cleaner",      "clerk",        "coach",         "columnist",      "comedian",
    "commander",    "composer",      "conductor",    "consultant",    "cook",           "counselor",
    "critic",       "curator",       "dancer",       "dentist",       "dermatologist",  "designer",
    "detective",    "developer",     "diplomat",     "director",      "dispatcher",     "doctor",
    "drummer",      "economist",     "editor",       "educator",      "electrician",    "employee",
    "engineer",     "entrepreneur",  "environmentalist", "farmer",    "filmmaker",      "financier",
    "firefighter",  "geologist",     "guard",        "guitarist",     "hairdresser",    "historian",
    "housekeeper",  "illustrator",   "instructor",   "inspector",     "interpreter",    "inventor",
    "investigator", "janitor",       "journalist",   "judge",         "laborer",        "lawmaker",
    "lawyer",       "lecturer",      "librarian",    "lieutenant",    "lifeguard",      "magician",
    "manager",      "mathematician", "mechanic",     "mediator",      "minister",       "musician",
    "narrator",     "negotiator",    "neurologist",  "neurosurgeon",  "novelist",       "nurse",
    "officer",      "optician",      "painter",      "paralegal",     "paramedic",      "pathologist",
    "pediatrician", "performer",     "pharmacist",   "philosopher",   "photographer",   "physician",
    "physicist",    "pianist",       "pilot",        "planner",       "plumber",        "poet",
    "politician",   "pollster",      "president",    "principal",     "producer",       "professor",
    "programmer",   "promoter",      "prosecutor",   "psychiatrist",  "psychologist",   "publicist",
    "radiologist",  "ranger",        "receptionist", "recruiter",     "referee",        "reporter",
    "researcher",   "saxophonist",   "scholar",      "scientist",     "sculptor",       "secretary",
    "senator",      "sergeant",      "servant",      "sheriff",       "singer",         "soldier",
    "solicitor",    "strategist",    "student",      "supervisor",    "surgeon",        "surveyor",
    "tailor",       "teacher",       "technician",   "therapist",     "trader",         "translator",
    "treasurer",    "trooper",       "tutor",        "umpire",        "veterinarian",   "violinist",
    "writer",
};

constexpr std::array<const char*, 17> kGenderTemplates = {
    "the {occupation} laughed because {pronoun} was happy .",
    "the {occupation} cried because {pronoun} was sad .",
    "the {occupation} smiled because {pronoun} was pleased .",
    "the {occupation} left because {pronoun} was tired .",
    "the {occupation} stayed because {pronoun} was needed .",
    "the {occupation} slept because {pronoun} was exhausted .",
    "the {occupation} waited because {pronoun} was early .",
    "the {occupation} shouted because {pronoun} was angry .",
    "the {occupation} apologized because {pronoun} was late .",
    "the {occupation} panicked because {pronoun} was lost .",
    "the {occupation} resigned because {pronoun} was unhappy .",
    "the {occupation} hesitated because {pronoun} was unsure .",
    "the {occupation} complained because {pronoun} was cold .",
    "the {occupation} celebrated because {pronoun} was promoted .",
    "the {occupation} relaxed because {pronoun} was done .",
    "the {occupation} returned because {pronoun} was worried .",
    "the {occupation} whispered because {pronoun} was nervous .",
};

struct Slot {
  std::size_t position;  // 0-based token index
  std::string name;
};

struct ParsedTemplate {
  std::vector<std::string> tokens;
  std::vector<Slot> slots;

  std::size_t position_of(const std::string& name) const {
    for (const auto& s : slots) {
      if (s.name == name) return s.position;
    }
    return tokens.size();
  }
  std::size_t count(const std::string& name) const {
    return static_cast<std::size_t>(
        std::count_if(slots.begin(), slots.end(), [&](const Slot& s) { return s.name == name; }));
  }
};

ParsedTemplate parse_template(const std::string& text) {
  ParsedTemplate t;
  t.tokens = split_tokens(text);
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    const auto& tok = t.tokens[i];
    if (tok.size() > 2 && tok.front() == '{' && tok.back() == '}') {
      t.slots.push_back({i, tok.substr(1, tok.size() - 2)});
    }
  }
  return t;
}

std::size_t choices_for(const std::string& slot, const LexiconPools& pools) {
  if (slot == "subject") return pools.nouns.size() * 2;
  if (slot == "verb") return pools.verbs.size();
  if (slot == "preposition") return pools.prepositions.size();
  if (slot == "location") return pools.locations.size() * 2;
  if (slot == "adverb") return pools.adverbs.size();
  if (slot == "object") return pools.nouns.size() * 2;
  if (slot == "name") return pools.proper_nouns.size();
  throw GenerationError("unknown template slot {" + slot + "}");
}

void check_pools(const LexiconPools& pools) {
  auto check_pair = [](const std::vector<InflectedWord>& words, const char* pool) {
    for (const auto& w : words) {
      if (w.singular.empty() || w.plural.empty() || w.singular == w.plural) {
        throw GenerationError(std::string("pool '") + pool + "' has a word without two inflected forms");
      }
    }
  };
  check_pair(pools.nouns, "nouns");
  check_pair(pools.verbs, "verbs");
  check_pair(pools.locations, "locations");
}

const std::string& pick(Rng& rng, const std::vector<std::string>& pool) { return pool[rng.below(pool.size())]; }

const std::string& pick_inflected(Rng& rng, const std::vector<InflectedWord>& pool, bool plural) {
  const auto& w = pool[rng.below(pool.size())];
  return plural ? w.plural : w.singular;
}

SentenceInstance make_agreement(const ParsedTemplate& tpl, const LexiconPools& pools, bool plural, Rng& rng) {
  SentenceInstance inst;
  inst.task = Task::kAgreement;
  inst.attribute = plural ? "plural" : "singular";
  inst.tokens = tpl.tokens;
  for (const auto& slot : tpl.slots) {
    std::string& tok = inst.tokens[slot.position];
    if (slot.name == "subject") {
      tok = pick_inflected(rng, pools.nouns, plural);
      inst.intervention_position = slot.position + 1;
    } else if (slot.name == "verb") {
      const auto& v = pools.verbs[rng.below(pools.verbs.size())];
      tok = plural ? v.plural : v.singular;
      inst.d = tok;
      inst.t = plural ? v.singular : v.plural;
      inst.target_position = slot.position + 1;
    } else if (slot.name == "preposition") {
      tok = pick(rng, pools.prepositions);
    } else if (slot.name == "location") {
      tok = pick_inflected(rng, pools.locations, rng.below(2) == 1);
    } else if (slot.name == "adverb") {
      tok = pick(rng, pools.adverbs);
    } else if (slot.name == "object") {
      tok = pick_inflected(rng, pools.nouns, rng.below(2) == 1);
    } else if (slot.name == "name") {
      tok = pick(rng, pools.proper_nouns);
    }
  }
  return inst;
}

}  // namespace

std::string to_string(Task task) { return task == Task::kAgreement ? "agreement" : "gender"; }

Task task_from_string(const std::string& name) {
  if (name == "agreement") return Task::kAgreement;
  if (name == "gender") return Task::kGender;
  throw std::invalid_argument("unknown task '" + name + "' (expected agreement or gender)");
}

std::string SentenceInstance::text() const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

LexiconPools LexiconPools::standard() {
  LexiconPools p;
  for (const char* w : {"dog", "cat", "boy", "girl", "teacher", "farmer", "doctor", "pilot", "singer", "lawyer",
                        "student", "artist", "driver", "baker", "writer", "player", "friend", "officer", "nurse",
                        "worker"}) {
    p.nouns.push_back(regular(w));
  }
  for (const char* v : {"admire", "see", "like", "know", "love", "help", "hate", "meet", "greet", "thank", "trust",
                        "call", "find", "visit", "remember"}) {
    p.verbs.push_back(regular_verb(v));
  }
  p.adverbs = {"often", "rarely", "never", "always", "sometimes", "usually", "seldom", "certainly", "probably",
               "really"};
  p.prepositions = {"near", "behind", "beside", "above", "under"};
  p.proper_nouns = {"john", "mary", "alice", "peter", "susan", "david", "emma", "frank", "linda", "oscar"};
  for (const char* w : {"house", "car", "tree", "park", "school", "table", "bridge", "tower", "garden", "river"}) {
    p.locations.push_back(regular(w));
  }
  return p;
}

Split generate_agreement_corpus(std::uint64_t seed, std::size_t n_train, std::size_t n_eval,
                                const AgreementConfig& config) {
  if (n_train == 0 || n_eval == 0) throw GenerationError("agreement corpus sizes must be positive");
  check_pools(config.pools);
  const ParsedTemplate tpl = parse_template(config.sentence_template);
  if (tpl.count("subject") != 1 || tpl.count("verb") != 1) {
    throw GenerationError("agreement template needs exactly one {subject} and one {verb}");
  }
  if (tpl.position_of("subject") >= tpl.position_of("verb")) {
    throw GenerationError("agreement template must place {subject} before {verb}");
  }

  // Distinct sentences available per subject number.
  double space = 1.0;
  for (const auto& slot : tpl.slots) {
    space *= static_cast<double>(slot.name == "subject" ? config.pools.nouns.size() : choices_for(slot.name, config.pools));
    if (space == 0.0) throw GenerationError("empty pool for slot {" + slot.name + "}");
  }
  const std::size_t wanted = n_train + n_eval;
  // Keep rejection sampling cheap: ask for at most a quarter of the space.
  if (static_cast<double>(wanted) > space * 2.0 / 4.0) {
    throw GenerationError("pools too small for " + std::to_string(wanted) + " distinct sentences (space " +
                          std::to_string(static_cast<long long>(space * 2.0)) + ")");
  }

  Rng rng(seed);
  std::unordered_set<std::string> seen;
  auto draw_set = [&](std::size_t count) {
    std::vector<SentenceInstance> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
      const bool plural = (k % 2) == 1;
      for (;;) {
        SentenceInstance inst = make_agreement(tpl, config.pools, plural, rng);
        if (seen.insert(inst.text()).second) {
          out.push_back(std::move(inst));
          break;
        }
      }
    }
    rng.shuffle(out);
    return out;
  };
  Split split;
  split.train = draw_set(n_train);
  split.eval = draw_set(n_eval);
  return split;
}

SentenceInstance agreement_counterpart(const SentenceInstance& instance, const LexiconPools& pools) {
  if (instance.task != Task::kAgreement) throw std::invalid_argument("counterpart: not an agreement instance");
  SentenceInstance out = instance;
  const bool was_plural = instance.attribute == "plural";
  std::string& subject = out.tokens.at(instance.intervention_position - 1);
  bool found = false;
  for (const auto& n : pools.nouns) {
    if (subject == (was_plural ? n.plural : n.singular)) {
      subject = was_plural ? n.singular : n.plural;
      found = true;
      break;
    }
  }
  if (!found) throw std::invalid_argument("counterpart: subject '" + subject + "' not in pool");
  out.tokens.at(instance.target_position - 1) = instance.t;
  out.d = instance.t;
  out.t = instance.d;
  out.attribute = was_plural ? "singular" : "plural";
  return out;
}

GenderConfig GenderConfig::standard() {
  GenderConfig c;
  c.templates.assign(kGenderTemplates.begin(), kGenderTemplates.end());
  c.occupations.assign(kOccupations.begin(), kOccupations.end());
  return c;
}

Split generate_gender_corpus(std::uint64_t seed, std::size_t n_train, std::size_t n_eval, const GenderConfig& config) {
  if (n_train == 0 || n_eval == 0) throw GenerationError("gender corpus sizes must be positive");
  std::vector<ParsedTemplate> templates;
  for (const auto& text : config.templates) {
    ParsedTemplate tpl = parse_template(text);
    if (tpl.count("pronoun") != 1) throw GenerationError("gender template without a single {pronoun} slot: " + text);
    if (tpl.count("occupation") != 1) throw GenerationError("gender template without a single {occupation} slot: " + text);
    if (tpl.position_of("occupation") >= tpl.position_of("pronoun")) {
      throw GenerationError("gender template must place {occupation} before {pronoun}: " + text);
    }
    templates.push_back(std::move(tpl));
  }
  const std::size_t total = templates.size() * config.occupations.size();
  if (n_train + n_eval > total) {
    throw GenerationError("gender corpus has " + std::to_string(total) + " instances, requested " +
                          std::to_string(n_train + n_eval));
  }

  Rng rng(seed);
  if (!(config.bias > 0.5 && config.bias <= 1.0)) throw GenerationError("gender bias must lie in (0.5, 1]");
  // Half of the occupations lean male, half female; each sentence draws its
  // pronoun from the occupation's lean.
  std::vector<std::size_t> order(config.occupations.size());
  for (std::size_t o = 0; o < order.size(); ++o) order[o] = o;
  rng.shuffle(order);
  std::vector<double> p_he(config.occupations.size());
  for (std::size_t r = 0; r < order.size(); ++r) p_he[order[r]] = r % 2 == 0 ? config.bias : 1.0 - config.bias;

  std::vector<SentenceInstance> all;
  all.reserve(total);
  for (const auto& tpl : templates) {
    for (std::size_t o = 0; o < config.occupations.size(); ++o) {
      SentenceInstance inst;
      inst.task = Task::kGender;
      inst.tokens = tpl.tokens;
      const bool he = rng.uniform() < p_he[o];
      inst.attribute = p_he[o] > 0.5 ? "male" : "female";
      for (const auto& slot : tpl.slots) {
        if (slot.name == "occupation") {
          inst.tokens[slot.position] = config.occupations[o];
          inst.intervention_position = slot.position + 1;
        } else if (slot.name == "pronoun") {
          inst.tokens[slot.position] = he ? "he" : "she";
          inst.target_position = slot.position + 1;
        }
      }
      inst.d = he ? "he" : "she";
      inst.t = he ? "she" : "he";
      all.push_back(std::move(inst));
    }
  }
  rng.shuffle(all);
  Split split;
  split.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                    all.begin() + static_cast<std::ptrdiff_t>(n_train + n_eval));
  return split;
}

std::string validate_agreement(const SentenceInstance& inst) {
  if (inst.task != Task::kAgreement) return "not an agreement instance";
  const std::size_t i = inst.intervention_position;
  const std::size_t n = inst.target_position;
  if (i == 0 || n == 0 || i >= n || n > inst.tokens.size()) return "positions out of order";
  const std::string& subject = inst.tokens[i - 1];
  const std::string& verb = inst.tokens[n - 1];
  if (verb != inst.d) return "target token differs from d";
  if (inst.d == inst.t) return "d equals t";
  const bool subject_plural = ends_with_s(subject);
  if ((inst.attribute == "plural") != subject_plural) return "attribute disagrees with subject '" + subject + "'";
  // Third person singular present takes -s; the plural form is the bare stem.
  if (subject_plural) {
    if (ends_with_s(inst.d) || inst.t != inst.d + "s") return "plural subject '" + subject + "' with verb '" + verb + "'";
  } else {
    if (!ends_with_s(inst.d) || inst.t + "s" != inst.d) return "singular subject '" + subject + "' with verb '" + verb + "'";
  }
  return {};
}

std::string validate_gender(const SentenceInstance& inst) {
  if (inst.task != Task::kGender) return "not a gender instance";
  const std::size_t i = inst.intervention_position;
  const std::size_t n = inst.target_position;
  if (i == 0 || n == 0 || i >= n || n > inst.tokens.size()) return "positions out of order";
  const std::string& pronoun = inst.tokens[n - 1];
  if (pronoun != "he" && pronoun != "she") return "target is not a pronoun";
  if (inst.d != pronoun) return "d differs from the pronoun in the sentence";
  if (inst.t != (pronoun == "he" ? "she" : "he")) return "t is not the other pronoun";
  if (inst.attribute != "male" && inst.attribute != "female") return "unknown attribute";
  return {};
}

// --- Corpus files -----------------------------------------------------------

CorpusFormatError::CorpusFormatError(std::size_t line, const std::string& detail)
    : std::runtime_error("line " + std::to_string(line) + ": " + detail), line_(line) {}

std::string format_instance(const SentenceInstance& inst) {
  std::ostringstream out;
  out << inst.text() << '\t' << inst.intervention_position << '\t' << inst.target_position << '\t' << inst.d << '\t'
      << inst.t << '\t' << to_string(inst.task) << '\t' << inst.attribute;
  return out.str();
}

SentenceInstance parse_instance(const std::string& line, std::size_t line_number) {
  static const std::array<const char*, 7> kColumns = {"tokens", "i", "n", "d", "t", "task", "attribute"};
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  if (fields.size() < kColumns.size()) {
    throw CorpusFormatError(line_number, std::string("missing column '") + kColumns[fields.size()] + "'");
  }
  if (fields.size() > kColumns.size()) throw CorpusFormatError(line_number, "unexpected extra columns");

  auto parse_position = [&](const std::string& field, const char* column) -> std::size_t {
    std::size_t used = 0;
    unsigned long value = 0;
    try {
      value = std::stoul(field, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != field.size()) {
      throw CorpusFormatError(line_number, std::string("column '") + column + "' is not a position: '" + field + "'");
    }
    return value;
  };

  SentenceInstance inst;
  inst.tokens = split_tokens(fields[0]);
  if (inst.tokens.empty()) throw CorpusFormatError(line_number, "column 'tokens' is empty");
  inst.intervention_position = parse_position(fields[1], "i");
  inst.target_position = parse_position(fields[2], "n");
  inst.d = fields[3];
  inst.t = fields[4];
  try {
    inst.task = task_from_string(fields[5]);
  } catch (const std::invalid_argument&) {
    throw CorpusFormatError(line_number, "column 'task' has unknown value '" + fields[5] + "'");
  }
  inst.attribute = fields[6];
  if (inst.d.empty()) throw CorpusFormatError(line_number, "column 'd' is empty");
  if (inst.t.empty()) throw CorpusFormatError(line_number, "column 't' is empty");
  if (inst.intervention_position == 0 || inst.intervention_position >= inst.target_position ||
      inst.target_position > inst.tokens.size()) {
    throw CorpusFormatError(line_number, "positions i=" + fields[1] + ", n=" + fields[2] + " invalid for " +
                                             std::to_string(inst.tokens.size()) + " tokens");
  }
  return inst;
}

void write_corpus(const std::filesystem::path& path, const std::vector<SentenceInstance>& corpus) {
  std::string body;
  for (const auto& inst : corpus) {
    body += format_instance(inst);
    body += '\n';
  }
  write_file_atomic(path, body);
}

std::vector<SentenceInstance> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
  std::vector<SentenceInstance> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(parse_instance(line, number));
  }
  return out;
}

}  // namespace neuroflip::datagen
