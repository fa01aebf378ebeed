#pragma once

// Reverse-mode differentiation over dense row-major arrays of doubles.
//
// A Graph is an append-only record of primitive operations. Nodes are
// created through the builder methods, which check shapes eagerly, so a
// finished Graph is always well formed. Once built, a Graph is never
// mutated by evaluation: evaluate() returns a fresh Evaluation that holds
// every intermediate value, and backpropagate() allocates its own gradient
// buffers. Several threads may evaluate the same Graph concurrently.
//
// Supported ranks are 0 (scalar), 1 (vector) and 2 (matrix). Binary
// elementwise ops accept either equal shapes or a right-hand operand that
// broadcasts: a scalar, or a vector whose length equals the column count.

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuroflip::autodiff {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class ShapeError : public std::runtime_error {
 public:
  ShapeError(const std::string& op, const std::string& detail);
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense array of finite doubles with an explicit shape.
class RealArray {
 public:
  /// Scalar zero.
  RealArray();
  /// Throws ShapeError when the element count disagrees with the shape and
  /// NumericalError when a value is NaN or infinite.
  RealArray(Shape shape, std::vector<double> values);

  static RealArray zeros(Shape shape);
  static RealArray scalar(double value);
  static RealArray vector(std::vector<double> values);
  static RealArray matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  /// Leading dimension for matrices, 1 otherwise.
  std::size_t rows() const;
  /// Trailing dimension for vectors and matrices, 1 for scalars.
  std::size_t cols() const;

  std::span<const double> values() const { return values_; }
  std::span<double> mutable_values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(std::size_t row, std::size_t col) const { return values_[row * cols() + col]; }
  double item() const;

  bool all_finite() const;

  friend bool operator==(const RealArray&, const RealArray&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class Op : std::uint8_t {
  kInput,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kSigmoid,
  kTanh,
  kLog,
  kExp,
  kSoftmax,
  kLogSoftmax,
  kClamp,
  kEmbedding,
  kPick,
  kSum,
  kStack,
  kSlice,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::kInput;
  std::vector<NodeId> operands;
  Shape shape;
  // Op-specific scalars: scale factor, added constant, clamp bounds.
  double param0 = 0.0;
  double param1 = 0.0;
  // Slice bounds.
  std::size_t offset = 0;
  std::string name;
  RealArray constant;
};

/// The computation record. Builder methods append one node each and return
/// its id; operands must already exist, which keeps the record acyclic and
/// topologically ordered by construction.
class Graph {
 public:
  NodeId input(const std::string& name, Shape shape);
  NodeId constant(RealArray value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId add_scalar(NodeId a, double value);
  NodeId sigmoid(NodeId a);
  NodeId tanh(NodeId a);
  NodeId log(NodeId a);
  NodeId exp(NodeId a);
  /// Row-wise for matrices, whole-array for vectors.
  NodeId softmax(NodeId a);
  NodeId log_softmax(NodeId a);
  /// Gradient passes only where lo < a < hi.
  NodeId clamp(NodeId a, double lo, double hi);
  /// Row lookup: table [V, E], indices [B] of integral values -> [B, E].
  NodeId embedding(NodeId table, NodeId indices);
  /// Picks one column per row: a [B, V], indices [B] -> [B].
  NodeId pick(NodeId a, NodeId indices);
  /// Full reduction to a scalar.
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  /// Concatenates along the last axis. All parts share the leading shape.
  NodeId stack(const std::vector<NodeId>& parts);
  /// Columns [begin, begin + count) of the last axis.
  NodeId slice(NodeId a, std::size_t begin, std::size_t count);

  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  /// Input node by name; throws std::out_of_range when absent.
  NodeId input_id(const std::string& name) const;
  bool has_input(const std::string& name) const;

 private:
  NodeId push(Node node);
  void check_operand(NodeId id, const char* op) const;
  Shape broadcast_shape(const char* op, NodeId a, NodeId b) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_;
};

/// Named input bindings. Arrays are held by reference and must outlive any
/// Evaluation produced from them.
class Inputs {
 public:
  Inputs& bind(const std::string& name, const RealArray& value);
  const RealArray* find(const std::string& name) const;

 private:
  std::map<std::string, const RealArray*> bound_;
};

/// Values of every node after one forward pass.
class Evaluation {
 public:
  Evaluation() = default;
  Evaluation(Evaluation&&) = default;
  Evaluation& operator=(Evaluation&&) = default;
  Evaluation(const Evaluation&) = delete;
  Evaluation& operator=(const Evaluation&) = delete;

  const RealArray& value(NodeId id) const { return *view_.at(id.index); }

 private:
  friend Evaluation evaluate(const Graph& graph, const Inputs& inputs);
  std::vector<RealArray> owned_;
  std::vector<const RealArray*> view_;
};

/// Runs the record forward. Throws ShapeError for missing or mis-shaped
/// inputs and NumericalError when an operation produces NaN or infinity.
Evaluation evaluate(const Graph& graph, const Inputs& inputs);

struct Gradients {
  std::map<std::string, RealArray> by_input;
  /// Requested inputs the output does not depend on. They still receive a
  /// zero gradient in by_input.
  std::vector<std::string> detached;

  bool has_detached() const { return !detached.empty(); }
  const RealArray& operator[](const std::string& name) const { return by_input.at(name); }
};

/// Gradient of a scalar node with respect to the named inputs. Inputs not
/// listed in `wrt` receive nothing.
Gradients backpropagate(const Graph& graph, const Evaluation& evaluation, NodeId output,
                        const std::set<std::string>& wrt);

/// Max over coordinates of |analytic - central difference| /
/// (|analytic| + abs_floor), for one named input.
double finite_difference_check(const Graph& graph, const Inputs& inputs, NodeId output,
                               const std::string& input, double epsilon,
                               double abs_floor = 1e-6);

}  // namespace neuroflip::autodiff
