#include "neuroflip/lstm_lm.hpp"

#include "neuroflip/random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>

namespace neuroflip::lm {

namespace {

using autodiff::Graph;
using autodiff::NodeId;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstRowMap = Eigen::Map<const Eigen::RowVectorXd>;

ConstMatrixMap as_matrix(const RealArray& a) {
  return ConstMatrixMap(a.values().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void softmax_in_place(std::vector<double>& v) {
  const double peak = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double& x : v) {
    x = std::exp(x - peak);
    total += x;
  }
  for (double& x : v) x /= total;
}

std::string layer_name(std::size_t layer, const char* what) { return "layer" + std::to_string(layer) + "." + what; }

}  // namespace

// --- Vocabulary ---------------------------------------------------------------

Vocabulary::Vocabulary() {
  tokens_ = {kUnknownToken, kEndOfSentenceToken};
  ids_ = {{kUnknownToken, kUnknown}, {kEndOfSentenceToken, kEndOfSentence}};
}

Vocabulary Vocabulary::from_listing(const std::vector<std::string>& listing) {
  if (listing.size() < 2 || listing[0] != kUnknownToken || listing[1] != kEndOfSentenceToken) {
    throw VocabularyError("vocabulary listing must start with <unk> and <eos>");
  }
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  for (const auto& tok : listing) {
    if (tok.empty()) throw VocabularyError("empty token in vocabulary listing");
    if (!v.ids_.emplace(tok, static_cast<int>(v.tokens_.size())).second) {
      throw VocabularyError("duplicate token '" + tok + "' in vocabulary listing");
    }
    v.tokens_.push_back(tok);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  std::set<std::string> distinct(tokens.begin(), tokens.end());
  distinct.erase(kUnknownToken);
  distinct.erase(kEndOfSentenceToken);
  std::vector<std::string> listing = {kUnknownToken, kEndOfSentenceToken};
  listing.insert(listing.end(), distinct.begin(), distinct.end());
  return from_listing(listing);
}

Vocabulary Vocabulary::from_corpus(const std::vector<datagen::SentenceInstance>& corpus) {
  std::vector<std::string> tokens;
  for (const auto& inst : corpus) {
    tokens.insert(tokens.end(), inst.tokens.begin(), inst.tokens.end());
    tokens.push_back(inst.d);
    tokens.push_back(inst.t);
  }
  return from_tokens(tokens);
}

std::optional<int> Vocabulary::find(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(const std::string& token) const {
  auto found = find(token);
  if (!found) throw VocabularyError("token '" + token + "' is not in the vocabulary");
  return *found;
}

// --- Config and parameters ---------------------------------------------------------

void LMConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("LMConfig: num_layers must be at least 1");
  if (hidden_size < 8) throw std::invalid_argument("LMConfig: hidden_size must be at least 8");
  if (embedding_size < 1) throw std::invalid_argument("LMConfig: embedding_size must be positive");
  if (vocab_size < 3) throw std::invalid_argument("LMConfig: vocab_size must cover reserved tokens plus one word");
  if (tied_output) throw std::invalid_argument("LMConfig: tied output embeddings are not supported");
}

LMParameters LMParameters::zeros(const LMConfig& config) {
  config.validate();
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto E = static_cast<std::size_t>(config.embedding_size);
  const auto H = static_cast<std::size_t>(config.hidden_size);
  LMParameters p;
  p.embedding = RealArray::zeros({V, E});
  for (int l = 0; l < config.num_layers; ++l) {
    const std::size_t in = l == 0 ? E : H;
    p.layers.push_back({RealArray::zeros({in, 4 * H}), RealArray::zeros({H, 4 * H}), RealArray::zeros({4 * H})});
  }
  p.out_weight = RealArray::zeros({H, V});
  p.out_bias = RealArray::zeros({V});
  return p;
}

LMParameters LMParameters::initialize(const LMConfig& config, std::uint64_t seed, double scale) {
  LMParameters p = zeros(config);
  Rng rng(seed);
  const auto H = static_cast<std::size_t>(config.hidden_size);
  for (auto& [name, array] : p.named_mutable()) {
    const bool is_bias = name.ends_with("bias");
    for (std::size_t j = 0; j < array->size(); ++j) {
      if (!is_bias) (*array)[j] = rng.uniform(-scale, scale);
    }
  }
  for (auto& layer : p.layers) {
    for (std::size_t j = H; j < 2 * H; ++j) layer.bias[j] = 1.0;
  }
  return p;
}

std::vector<std::pair<std::string, const RealArray*>> LMParameters::named() const {
  std::vector<std::pair<std::string, const RealArray*>> out;
  out.emplace_back("embedding", &embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out.emplace_back(layer_name(l, "w_input"), &layers[l].w_input);
    out.emplace_back(layer_name(l, "w_hidden"), &layers[l].w_hidden);
    out.emplace_back(layer_name(l, "bias"), &layers[l].bias);
  }
  out.emplace_back("output.weight", &out_weight);
  out.emplace_back("output.bias", &out_bias);
  return out;
}

std::vector<std::pair<std::string, RealArray*>> LMParameters::named_mutable() {
  std::vector<std::pair<std::string, RealArray*>> out;
  for (auto& [name, ptr] : std::as_const(*this).named()) out.emplace_back(name, const_cast<RealArray*>(ptr));
  return out;
}

void LMParameters::check_shapes(const LMConfig& config) const {
  const LMParameters expected = zeros(config);
  const auto want = expected.named();
  const auto have = named();
  if (want.size() != have.size()) {
    throw autodiff::ShapeError("LMParameters", "LMParameters: expected " + std::to_string(config.num_layers) +
                                                   " layers, found " + std::to_string(layers.size()));
  }
  for (std::size_t k = 0; k < want.size(); ++k) {
    if (want[k].second->shape() != have[k].second->shape()) {
      throw autodiff::ShapeError("LMParameters", "LMParameters: '" + want[k].first + "' expected shape " +
                                                     autodiff::shape_string(want[k].second->shape()) + ", got " +
                                                     autodiff::shape_string(have[k].second->shape()));
    }
  }
}

// --- Direct evaluation ----------------------------------------------------------

LMState LMState::initial(const LMConfig& config) {
  LMState s;
  s.hidden.assign(static_cast<std::size_t>(config.num_layers), std::vector<double>(config.hidden_size, 0.0));
  s.cell = s.hidden;
  return s;
}

std::vector<double> LMState::concatenated_hidden() const {
  std::vector<double> out;
  for (const auto& h : hidden) out.insert(out.end(), h.begin(), h.end());
  return out;
}

StepOutput forward_step(const LanguageModel& model, const LMState& state, int token, const HiddenHook& hook) {
  const LMConfig& cfg = model.config;
  if (token < 0 || token >= cfg.vocab_size) {
    throw std::out_of_range("forward_step: token id " + std::to_string(token) + " outside [0, " +
                            std::to_string(cfg.vocab_size) + ")");
  }
  if (static_cast<int>(state.hidden.size()) != cfg.num_layers || static_cast<int>(state.cell.size()) != cfg.num_layers) {
    throw autodiff::ShapeError("forward_step", "forward_step: state has wrong layer count");
  }
  const auto H = static_cast<Eigen::Index>(cfg.hidden_size);
  const auto E = static_cast<Eigen::Index>(cfg.embedding_size);

  StepOutput out;
  out.state.step = state.step + 1;
  out.state.hidden.resize(state.hidden.size());
  out.state.cell.resize(state.cell.size());

  Eigen::RowVectorXd input = ConstRowMap(model.params.embedding.values().data() + token * E, E);
  for (std::size_t l = 0; l < state.hidden.size(); ++l) {
    const LayerWeights& w = model.params.layers[l];
    if (static_cast<Eigen::Index>(state.hidden[l].size()) != H || static_cast<Eigen::Index>(state.cell[l].size()) != H) {
      throw autodiff::ShapeError("forward_step", "forward_step: state vector length differs from hidden_size");
    }
    const ConstRowMap h_prev(state.hidden[l].data(), H);
    const ConstRowMap c_prev(state.cell[l].data(), H);
    Eigen::RowVectorXd gates = input * as_matrix(w.w_input) + h_prev * as_matrix(w.w_hidden);
    gates += ConstRowMap(w.bias.values().data(), 4 * H);

    std::vector<double>& h = out.state.hidden[l];
    std::vector<double>& c = out.state.cell[l];
    h.resize(static_cast<std::size_t>(H));
    c.resize(static_cast<std::size_t>(H));
    for (Eigen::Index j = 0; j < H; ++j) {
      const double ig = sigmoid(gates[j]);
      const double fg = sigmoid(gates[H + j]);
      const double gg = std::tanh(gates[2 * H + j]);
      const double og = sigmoid(gates[3 * H + j]);
      c[j] = fg * c_prev[j] + ig * gg;
      h[j] = og * std::tanh(c[j]);
    }
    input = ConstRowMap(h.data(), H);
  }

  if (hook) {
    const std::vector<double> original = out.state.concatenated_hidden();
    std::vector<double> replaced = hook(original, out.state.step);
    if (replaced.size() != original.size()) {
      throw autodiff::ShapeError("forward_step", "forward_step: hook returned " + std::to_string(replaced.size()) +
                                                     " values, expected " + std::to_string(original.size()));
    }
    for (std::size_t l = 0; l < out.state.hidden.size(); ++l) {
      std::copy_n(replaced.begin() + static_cast<std::ptrdiff_t>(l * H), H, out.state.hidden[l].begin());
    }
  }

  const ConstRowMap top(out.state.hidden.back().data(), H);
  Eigen::RowVectorXd logits = top * as_matrix(model.params.out_weight);
  logits += ConstRowMap(model.params.out_bias.values().data(), cfg.vocab_size);
  out.distribution.assign(logits.data(), logits.data() + logits.size());
  softmax_in_place(out.distribution);
  return out;
}

SequenceRun run_sequence(const LanguageModel& model, std::span<const int> tokens, std::size_t steps,
                         const HiddenHook& hook) {
  if (steps > tokens.size()) throw std::out_of_range("run_sequence: more steps than tokens");
  SequenceRun run;
  run.hidden.reserve(steps);
  run.distributions.reserve(steps);
  LMState state = LMState::initial(model.config);
  for (std::size_t s = 0; s < steps; ++s) {
    StepOutput next = forward_step(model, state, tokens[s], hook);
    run.hidden.push_back(next.state.concatenated_hidden());
    run.distributions.push_back(std::move(next.distribution));
    state = std::move(next.state);
  }
  return run;
}

// --- Graph path -------------------------------------------------------------

std::string token_input_name(std::size_t step) { return "tokens." + std::to_string(step); }

SequenceGraph build_sequence_graph(Graph& g, const LMConfig& config, std::size_t batch, std::size_t steps,
                                   const GraphHiddenHook& hook) {
  config.validate();
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto E = static_cast<std::size_t>(config.embedding_size);
  const auto H = static_cast<std::size_t>(config.hidden_size);
  const auto L = static_cast<std::size_t>(config.num_layers);

  const NodeId embedding = g.input("embedding", {V, E});
  std::vector<NodeId> w_in(L), w_h(L), bias(L);
  for (std::size_t l = 0; l < L; ++l) {
    w_in[l] = g.input(layer_name(l, "w_input"), {l == 0 ? E : H, 4 * H});
    w_h[l] = g.input(layer_name(l, "w_hidden"), {H, 4 * H});
    bias[l] = g.input(layer_name(l, "bias"), {4 * H});
  }
  const NodeId out_w = g.input("output.weight", {H, V});
  const NodeId out_b = g.input("output.bias", {V});

  SequenceGraph seq;
  std::vector<std::optional<NodeId>> h(L), c(L);
  for (std::size_t s = 0; s < steps; ++s) {
    const NodeId tokens = g.input(token_input_name(s + 1), {batch});
    seq.token_inputs.push_back(tokens);
    NodeId input = g.embedding(embedding, tokens);
    for (std::size_t l = 0; l < L; ++l) {
      NodeId pre = g.matmul(input, w_in[l]);
      if (h[l]) pre = g.add(pre, g.matmul(*h[l], w_h[l]));
      pre = g.add(pre, bias[l]);
      const NodeId ig = g.sigmoid(g.slice(pre, 0, H));
      const NodeId fg = g.sigmoid(g.slice(pre, H, H));
      const NodeId gg = g.tanh(g.slice(pre, 2 * H, H));
      const NodeId og = g.sigmoid(g.slice(pre, 3 * H, H));
      NodeId cell = g.mul(ig, gg);
      if (c[l]) cell = g.add(g.mul(fg, *c[l]), cell);
      c[l] = cell;
      h[l] = g.mul(og, g.tanh(cell));
      input = *h[l];
    }
    std::vector<NodeId> parts;
    for (const auto& layer_h : h) parts.push_back(*layer_h);
    NodeId concat = L == 1 ? parts[0] : g.stack(parts);
    if (hook) {
      concat = hook(g, concat, static_cast<int>(s + 1));
      for (std::size_t l = 0; l < L; ++l) h[l] = g.slice(concat, l * H, H);
    }
    seq.hidden.push_back(concat);
    seq.logits.push_back(g.add(g.matmul(*h[L - 1], out_w), out_b));
  }
  return seq;
}

void bind_parameters(autodiff::Inputs& inputs, const LMParameters& params) {
  for (const auto& [name, array] : params.named()) inputs.bind(name, *array);
}

// --- Encoding ---------------------------------------------------------------

EncodedInstance encode(const Vocabulary& vocab, const datagen::SentenceInstance& instance) {
  EncodedInstance e;
  e.tokens.reserve(instance.tokens.size());
  for (const auto& tok : instance.tokens) e.tokens.push_back(vocab.id(tok));
  e.intervention_position = instance.intervention_position;
  e.target_position = instance.target_position;
  e.d = vocab.id(instance.d);
  e.t = vocab.id(instance.t);
  if (e.intervention_position == 0 || e.intervention_position >= e.target_position ||
      e.target_position > e.tokens.size()) {
    throw std::invalid_argument("encode: invalid positions for '" + instance.text() + "'");
  }
  return e;
}

std::vector<EncodedInstance> encode_all(const Vocabulary& vocab, const std::vector<datagen::SentenceInstance>& corpus) {
  std::vector<EncodedInstance> out;
  out.reserve(corpus.size());
  for (const auto& inst : corpus) out.push_back(encode(vocab, inst));
  return out;
}

std::vector<int> training_sequence(const Vocabulary& vocab, const datagen::SentenceInstance& instance) {
  std::vector<int> seq;
  seq.reserve(instance.tokens.size() + 1);
  for (const auto& tok : instance.tokens) seq.push_back(vocab.id(tok));
  seq.push_back(Vocabulary::kEndOfSentence);
  return seq;
}

// --- Training -----------------------------------------------------------------

namespace {

struct TrainingGraph {
  Graph graph;
  SequenceGraph seq;
  std::vector<std::string> target_names;
  NodeId loss;
};

TrainingGraph build_training_graph(const LMConfig& config, std::size_t batch, std::size_t steps) {
  TrainingGraph tg;
  tg.seq = build_sequence_graph(tg.graph, config, batch, steps);
  std::vector<NodeId> picked;
  for (std::size_t s = 0; s < steps; ++s) {
    tg.target_names.push_back("targets." + std::to_string(s + 1));
    const NodeId target = tg.graph.input(tg.target_names.back(), {batch});
    picked.push_back(tg.graph.pick(tg.graph.log_softmax(tg.seq.logits[s]), target));
  }
  const NodeId all = picked.size() == 1 ? picked[0] : tg.graph.stack(picked);
  tg.loss = tg.graph.scale(tg.graph.sum(all), -1.0 / static_cast<double>(batch * steps));
  return tg;
}

}  // namespace

TrainResult train_lm(const LMConfig& config, const std::vector<std::vector<int>>& corpus, const TrainOptions& options,
                     const EpochCallback& on_epoch) {
  config.validate();
  if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
  if (options.batch_size < 1 || options.epochs < 0) throw std::invalid_argument("train_lm: invalid batch size or epochs");
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw std::invalid_argument("train_lm: sequences need at least two tokens");
    for (int tok : seq) {
      if (tok < 0 || tok >= config.vocab_size) throw std::out_of_range("train_lm: token id outside vocabulary");
    }
  }

  Rng rng(options.seed);
  TrainResult result;
  result.params = LMParameters::initialize(config, rng.next());

  // Sentences of equal length share a batch.
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t k = 0; k < corpus.size(); ++k) buckets[corpus[k].size()].push_back(k);

  std::map<std::pair<std::size_t, std::size_t>, TrainingGraph> graphs;
  std::set<std::string> wrt;
  for (const auto& [name, _] : result.params.named()) wrt.insert(name);

  const auto B = static_cast<std::size_t>(options.batch_size);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> batches;
    for (auto& [len, members] : buckets) {
      rng.shuffle(members);
      for (std::size_t start = 0; start < members.size(); start += B) {
        const std::size_t end = std::min(members.size(), start + B);
        batches.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(start),
                             members.begin() + static_cast<std::ptrdiff_t>(end));
      }
    }
    rng.shuffle(batches);

    double loss_sum = 0.0;
    std::size_t token_count = 0;
    for (const auto& batch : batches) {
      const std::size_t steps = corpus[batch[0]].size() - 1;
      const auto key = std::make_pair(batch.size(), steps);
      auto it = graphs.find(key);
      if (it == graphs.end()) it = graphs.emplace(key, build_training_graph(config, batch.size(), steps)).first;
      const TrainingGraph& tg = it->second;

      std::vector<RealArray> tokens(steps), targets(steps);
      autodiff::Inputs inputs;
      bind_parameters(inputs, result.params);
      for (std::size_t s = 0; s < steps; ++s) {
        std::vector<double> tok(batch.size()), tgt(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
          tok[b] = corpus[batch[b]][s];
          tgt[b] = corpus[batch[b]][s + 1];
        }
        tokens[s] = RealArray::vector(std::move(tok));
        targets[s] = RealArray::vector(std::move(tgt));
        inputs.bind(token_input_name(s + 1), tokens[s]);
        inputs.bind(tg.target_names[s], targets[s]);
      }

      double loss = 0.0;
      autodiff::Gradients grads;
      try {
        const autodiff::Evaluation ev = autodiff::evaluate(tg.graph, inputs);
        loss = ev.value(tg.loss).item();
        grads = autodiff::backpropagate(tg.graph, ev, tg.loss, wrt);
      } catch (const autodiff::NumericalError& e) {
        throw TrainingDiverged("train_lm: epoch " + std::to_string(epoch + 1) + ": " + e.what());
      }

      double norm_sq = 0.0;
      for (const auto& [name, grad] : grads.by_input) {
        for (double v : grad.values()) norm_sq += v * v;
      }
      const double norm = std::sqrt(norm_sq);
      if (!std::isfinite(norm)) throw TrainingDiverged("train_lm: non-finite gradient norm");
      const double clip = norm > options.clip_norm ? options.clip_norm / norm : 1.0;
      const double step = options.learning_rate * clip;
      for (auto& [name, param] : result.params.named_mutable()) {
        auto g = grads[name].values();
        auto p = param->mutable_values();
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= step * g[j];
      }

      loss_sum += loss * static_cast<double>(batch.size() * steps);
      token_count += batch.size() * steps;
    }
    const double mean = loss_sum / static_cast<double>(token_count);
    if (!std::isfinite(mean)) throw TrainingDiverged("train_lm: loss became non-finite");
    result.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  return result;
}

double cross_entropy(const LanguageModel& model, const std::vector<std::vector<int>>& corpus) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    const SequenceRun run = run_sequence(model, seq, seq.size() - 1);
    for (std::size_t s = 0; s + 1 < seq.size(); ++s) {
      total -= std::log(run.distributions[s][static_cast<std::size_t>(seq[s + 1])]);
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: no predictable tokens");
  return total / static_cast<double>(count);
}

std::vector<double> target_distribution(const LanguageModel& model, const EncodedInstance& instance,
                                        const HiddenHook& hook) {
  const std::size_t steps = instance.target_position - 1;
  LMState state = LMState::initial(model.config);
  std::vector<double> dist;
  for (std::size_t s = 0; s < steps; ++s) {
    StepOutput next = forward_step(model, state, instance.tokens[s], hook);
    state = std::move(next.state);
    dist = std::move(next.distribution);
  }
  return dist;
}

double agreement_accuracy(const LanguageModel& model, std::span<const EncodedInstance> eval) {
  if (eval.empty()) throw std::invalid_argument("empty evaluation set");
  std::size_t correct = 0;
  for (const auto& inst : eval) {
    const auto dist = target_distribution(model, inst);
    if (dist[static_cast<std::size_t>(inst.d)] > dist[static_cast<std::size_t>(inst.t)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

}  // namespace neuroflip::lm
