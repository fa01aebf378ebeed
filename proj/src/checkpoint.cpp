// Checkpoint layout (version 1):
//
//   neuroflip-checkpoint
//   version 1
//   num_layers <int>
//   hidden_size <int>
//   embedding_size <int>
//   vocab_size <int>
//   tied_output <0|1>
//   vocab <count>
//   <one token per line, in id order>
//   arrays <count>
//   <name> <rank> <dim>...     (one line per array)
//   end
//
// followed by the arrays' values in header order as little-endian IEEE-754
// doubles, nothing else.

#include "neuroflip/fileio.hpp"
#include "neuroflip/lstm_lm.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace neuroflip::lm {

namespace {

constexpr const char* kMagic = "neuroflip-checkpoint";

void append_le(std::string& out, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

double read_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

[[noreturn]] void corrupt(const std::string& detail) {
  throw CheckpointError(CheckpointError::Kind::kCorruptHeader, "checkpoint header: " + detail);
}

int read_field(std::istream& in, const std::string& expected_key) {
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint ends inside header");
  std::istringstream fields(line);
  std::string key;
  long long value = 0;
  if (!(fields >> key) || key != expected_key) corrupt("expected '" + expected_key + "', got '" + line + "'");
  if (!(fields >> value)) corrupt("field '" + expected_key + "' has no integer value");
  if (value < 0 || value > (1LL << 31)) corrupt("field '" + expected_key + "' out of range");
  return static_cast<int>(value);
}

}  // namespace

CheckpointError::CheckpointError(Kind kind, const std::string& detail) : std::runtime_error(detail), kind_(kind) {}

void save_checkpoint(const std::filesystem::path& path, const LanguageModel& model) {
  model.config.validate();
  model.params.check_shapes(model.config);
  if (model.vocab.size() != model.config.vocab_size) {
    throw CheckpointError(CheckpointError::Kind::kShapeMismatch, "vocabulary size differs from config vocab_size");
  }
  std::ostringstream header;
  header << kMagic << '\n'
         << "version " << kCheckpointVersion << '\n'
         << "num_layers " << model.config.num_layers << '\n'
         << "hidden_size " << model.config.hidden_size << '\n'
         << "embedding_size " << model.config.embedding_size << '\n'
         << "vocab_size " << model.config.vocab_size << '\n'
         << "tied_output " << (model.config.tied_output ? 1 : 0) << '\n'
         << "vocab " << model.vocab.size() << '\n';
  for (const auto& tok : model.vocab.tokens()) header << tok << '\n';
  const auto arrays = model.params.named();
  header << "arrays " << arrays.size() << '\n';
  for (const auto& [name, array] : arrays) {
    header << name << ' ' << array->rank();
    for (std::size_t d : array->shape()) header << ' ' << d;
    header << '\n';
  }
  header << "end\n";

  std::string blob = header.str();
  for (const auto& [name, array] : arrays) {
    for (double v : array->values()) append_le(blob, v);
  }
  write_file_atomic(path, blob);
}

LanguageModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open checkpoint " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint is empty");
  if (line != kMagic) corrupt("missing magic line");
  const int version = read_field(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersionMismatch, "checkpoint version " + std::to_string(version) +
                                                                       ", expected " +
                                                                       std::to_string(kCheckpointVersion));
  }
  LMConfig config;
  config.num_layers = read_field(in, "num_layers");
  config.hidden_size = read_field(in, "hidden_size");
  config.embedding_size = read_field(in, "embedding_size");
  config.vocab_size = read_field(in, "vocab_size");
  config.tied_output = read_field(in, "tied_output") != 0;
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    corrupt(e.what());
  }

  const int vocab_count = read_field(in, "vocab");
  if (vocab_count != config.vocab_size) {
    throw CheckpointError(CheckpointError::Kind::kShapeMismatch, "vocabulary listing has " +
                                                                     std::to_string(vocab_count) + " tokens, config says " +
                                                                     std::to_string(config.vocab_size));
  }
  std::vector<std::string> listing;
  for (int k = 0; k < vocab_count; ++k) {
    if (!std::getline(in, line)) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint ends inside vocabulary");
    listing.push_back(line);
  }
  Vocabulary vocab;
  try {
    vocab = Vocabulary::from_listing(listing);
  } catch (const VocabularyError& e) {
    corrupt(e.what());
  }

  LMParameters params = LMParameters::zeros(config);
  auto slots = params.named_mutable();
  const int array_count = read_field(in, "arrays");
  if (array_count != static_cast<int>(slots.size())) {
    throw CheckpointError(CheckpointError::Kind::kShapeMismatch, "checkpoint has " + std::to_string(array_count) +
                                                                     " arrays, config implies " +
                                                                     std::to_string(slots.size()));
  }
  for (auto& [name, array] : slots) {
    if (!std::getline(in, line)) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint ends inside array table");
    std::istringstream fields(line);
    std::string stored_name;
    std::size_t rank = 0;
    if (!(fields >> stored_name >> rank) || rank > 2) corrupt("bad array line '" + line + "'");
    if (stored_name != name) corrupt("expected array '" + name + "', got '" + stored_name + "'");
    autodiff::Shape shape(rank);
    for (auto& d : shape) {
      if (!(fields >> d)) corrupt("bad array line '" + line + "'");
    }
    if (shape != array->shape()) {
      throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                            "array '" + name + "' stored as " + autodiff::shape_string(shape) + ", config implies " +
                                autodiff::shape_string(array->shape()));
    }
  }
  if (!std::getline(in, line) || line != "end") corrupt("missing end marker");

  for (auto& [name, array] : slots) {
    std::vector<unsigned char> bytes(array->size() * 8);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
      throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated in array '" + name + "'");
    }
    auto values = array->mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      values[j] = read_le(bytes.data() + 8 * j);
      if (!std::isfinite(values[j])) corrupt("non-finite value in array '" + name + "'");
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) corrupt("trailing bytes after arrays");

  return LanguageModel{config, std::move(params), std::move(vocab)};
}

LanguageModel load_checkpoint(const std::filesystem::path& path, const LMConfig& expected) {
  LanguageModel model = load_checkpoint(path);
  if (!(model.config == expected)) {
    throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                          "checkpoint config (layers " + std::to_string(model.config.num_layers) + ", hidden " +
                              std::to_string(model.config.hidden_size) + ", embedding " +
                              std::to_string(model.config.embedding_size) + ", vocab " +
                              std::to_string(model.config.vocab_size) + ") differs from expected (layers " +
                              std::to_string(expected.num_layers) + ", hidden " + std::to_string(expected.hidden_size) +
                              ", embedding " + std::to_string(expected.embedding_size) + ", vocab " +
                              std::to_string(expected.vocab_size) + ")");
  }
  return model;
}

}  // namespace neuroflip::lm
