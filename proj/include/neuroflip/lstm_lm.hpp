#pragma once

// Two-layer LSTM language model.
//
// Two evaluation paths share one parameter set:
//  * forward_step(): a direct per-token implementation with an optional
//    hook on the concatenated hidden vector. Used for inference, contrast
//    assignment, evaluation and traces.
//  * build_sequence_graph(): the same computation recorded as an autodiff
//    Graph over a batch of equal-length sentences. Used for training and for
//    gradient-based unit search.
//
// Gate blocks in every weight matrix are ordered input, forget, cell, output.
// Hidden units are indexed across layers: unit u < hidden_size belongs to
// layer 0, unit hidden_size + j to layer 1, and so on.

#include "neuroflip/autodiff.hpp"
#include "neuroflip/datagen.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuroflip::lm {

using autodiff::RealArray;

class VocabularyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Vocabulary {
 public:
  static constexpr int kUnknown = 0;
  static constexpr int kEndOfSentence = 1;
  static constexpr const char* kUnknownToken = "<unk>";
  static constexpr const char* kEndOfSentenceToken = "<eos>";

  Vocabulary();
  /// Reserved tokens first, then the remaining distinct tokens in sorted order.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);
  static Vocabulary from_corpus(const std::vector<datagen::SentenceInstance>& corpus);
  /// Exact id listing, as stored in checkpoints. Reserved tokens must lead.
  static Vocabulary from_listing(const std::vector<std::string>& listing);

  std::optional<int> find(const std::string& token) const;
  /// Throws VocabularyError for unknown tokens.
  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

struct LMConfig {
  int num_layers = 2;
  int hidden_size = 64;
  int embedding_size = 64;
  int vocab_size = 0;
  bool tied_output = false;

  /// Total hidden units k across layers.
  int units() const { return num_layers * hidden_size; }
  void validate() const;
  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

struct LayerWeights {
  RealArray w_input;   // [in, 4H]
  RealArray w_hidden;  // [H, 4H]
  RealArray bias;      // [4H]

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct LMParameters {
  RealArray embedding;  // [V, E]
  std::vector<LayerWeights> layers;
  RealArray out_weight;  // [H, V]
  RealArray out_bias;    // [V]

  /// Uniform(-scale, scale) weights, zero biases except forget gates at 1.
  static LMParameters initialize(const LMConfig& config, std::uint64_t seed, double scale = 0.1);
  static LMParameters zeros(const LMConfig& config);

  /// Named arrays in a fixed order; names match the graph input names.
  std::vector<std::pair<std::string, const RealArray*>> named() const;
  std::vector<std::pair<std::string, RealArray*>> named_mutable();
  /// Throws ShapeError naming the first array inconsistent with `config`.
  void check_shapes(const LMConfig& config) const;

  friend bool operator==(const LMParameters&, const LMParameters&) = default;
};

struct LanguageModel {
  LMConfig config;
  LMParameters params;
  Vocabulary vocab;
};

struct LMState {
  std::vector<std::vector<double>> hidden;  // per layer
  std::vector<std::vector<double>> cell;    // per layer
  int step = 0;                             // tokens consumed so far

  static LMState initial(const LMConfig& config);
  /// Layer hidden vectors back to back, length k.
  std::vector<double> concatenated_hidden() const;
};

/// Receives the concatenated hidden vector after the recurrent update at
/// 1-based `step` and returns its replacement.
using HiddenHook = std::function<std::vector<double>(std::span<const double> hidden, int step)>;

struct StepOutput {
  LMState state;
  std::vector<double> distribution;  // next-token probabilities
};

StepOutput forward_step(const LanguageModel& model, const LMState& state, int token,
                        const HiddenHook& hook = nullptr);

/// Per-step record of a full pass over a prefix.
struct SequenceRun {
  std::vector<std::vector<double>> hidden;         // hook output per step, length k
  std::vector<std::vector<double>> distributions;  // next-token distribution per step
};

/// Feeds tokens[0 .. steps) and records every step.
SequenceRun run_sequence(const LanguageModel& model, std::span<const int> tokens, std::size_t steps,
                         const HiddenHook& hook = nullptr);

// --- Graph path -------------------------------------------------------------

/// Graph-side hook: receives the [B, k] concatenated hidden node at 1-based
/// `step` and returns the node that replaces it.
using GraphHiddenHook = std::function<autodiff::NodeId(autodiff::Graph&, autodiff::NodeId hidden, int step)>;

struct SequenceGraph {
  std::vector<autodiff::NodeId> token_inputs;  // [B] index inputs "tokens.<step>"
  std::vector<autodiff::NodeId> logits;        // [B, V] per step
  std::vector<autodiff::NodeId> hidden;        // [B, k] per step, after the hook
};

std::string token_input_name(std::size_t step);

/// Records `steps` recurrent steps for a batch. Parameter inputs are named
/// as in LMParameters::named().
SequenceGraph build_sequence_graph(autodiff::Graph& graph, const LMConfig& config, std::size_t batch,
                                   std::size_t steps, const GraphHiddenHook& hook = nullptr);

void bind_parameters(autodiff::Inputs& inputs, const LMParameters& params);

// --- Encoding ---------------------------------------------------------------

struct EncodedInstance {
  std::vector<int> tokens;
  std::size_t intervention_position = 0;  // 1-based
  std::size_t target_position = 0;        // 1-based
  int d = 0;
  int t = 0;
};

/// Throws VocabularyError naming the first token missing from the vocabulary.
EncodedInstance encode(const Vocabulary& vocab, const datagen::SentenceInstance& instance);
std::vector<EncodedInstance> encode_all(const Vocabulary& vocab, const std::vector<datagen::SentenceInstance>& corpus);

/// Sentence tokens followed by end-of-sentence, as used for training.
std::vector<int> training_sequence(const Vocabulary& vocab, const datagen::SentenceInstance& instance);

// --- Training and evaluation ---------------------------------------------------

struct TrainOptions {
  double learning_rate = 5.0;
  int epochs = 12;
  int batch_size = 32;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
};

struct TrainResult {
  LMParameters params;
  std::vector<double> epoch_loss;  // mean cross-entropy, nats per token
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Plain SGD with global gradient-norm clipping. Deterministic given the seed.
TrainResult train_lm(const LMConfig& config, const std::vector<std::vector<int>>& corpus, const TrainOptions& options,
                     const EpochCallback& on_epoch = nullptr);

/// Mean cross-entropy in nats per predicted token.
double cross_entropy(const LanguageModel& model, const std::vector<std::vector<int>>& corpus);

/// Fraction of instances where p(d) > p(t) at the target position, with d
/// the grammatical form as generated.
double agreement_accuracy(const LanguageModel& model, std::span<const EncodedInstance> eval);

/// Next-token distribution at the target position of an instance.
std::vector<double> target_distribution(const LanguageModel& model, const EncodedInstance& instance,
                                        const HiddenHook& hook = nullptr);

// --- Checkpoints ----------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kVersionMismatch, kCorruptHeader, kTruncated, kShapeMismatch };
  CheckpointError(Kind kind, const std::string& detail);
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const LanguageModel& model);
LanguageModel load_checkpoint(const std::filesystem::path& path);
/// As above, and fails with kShapeMismatch unless the stored config equals `expected`.
LanguageModel load_checkpoint(const std::filesystem::path& path, const LMConfig& expected);

}  // namespace neuroflip::lm
