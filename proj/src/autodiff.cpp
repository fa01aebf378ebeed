#include "neuroflip/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace neuroflip::autodiff {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t rows_of(const Shape& shape) { return shape.size() == 2 ? shape[0] : 1; }
std::size_t cols_of(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

ConstMatrixMap as_matrix(const RealArray& a) {
  return ConstMatrixMap(a.values().data(), static_cast<Eigen::Index>(a.rows()),
                        static_cast<Eigen::Index>(a.cols()));
}

MatrixMap as_matrix(RealArray& a) {
  return MatrixMap(a.mutable_values().data(), static_cast<Eigen::Index>(a.rows()),
                   static_cast<Eigen::Index>(a.cols()));
}

std::size_t checked_index(double raw, std::size_t limit, const char* op) {
  if (raw < 0.0 || raw != std::floor(raw) || raw >= static_cast<double>(limit)) {
    std::ostringstream msg;
    msg << op << ": index " << raw << " outside [0, " << limit << ")";
    throw ShapeError(op, msg.str());
  }
  return static_cast<std::size_t>(raw);
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Adds `grad` (shaped like the broadcast result) into the gradient buffer of
// an operand whose own shape may be the broadcast source.
void accumulate_broadcast(RealArray& target, const RealArray& grad, const std::vector<double>* weights) {
  auto out = target.mutable_values();
  auto g = grad.values();
  if (target.size() == grad.size()) {
    if (weights) {
      for (std::size_t j = 0; j < g.size(); ++j) out[j] += g[j] * (*weights)[j];
    } else {
      for (std::size_t j = 0; j < g.size(); ++j) out[j] += g[j];
    }
    return;
  }
  if (target.size() == 1) {
    double total = 0.0;
    for (std::size_t j = 0; j < g.size(); ++j) total += weights ? g[j] * (*weights)[j] : g[j];
    out[0] += total;
    return;
  }
  const std::size_t cols = target.size();
  const std::size_t rows = g.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t j = r * cols + c;
      out[c] += weights ? g[j] * (*weights)[j] : g[j];
    }
  }
}

// Value of the right operand at flat position j of the broadcast result.
inline double broadcast_at(std::span<const double> b, std::size_t j) {
  return b.size() == 1 ? b[0] : b[j % b.size()];
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

ShapeError::ShapeError(const std::string& op, const std::string& detail)
    : std::runtime_error(detail), op_(op) {}

RealArray::RealArray() : shape_{}, values_{0.0} {}

RealArray::RealArray(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.size() > 2) {
    throw ShapeError("RealArray", "RealArray: rank " + std::to_string(shape_.size()) + " unsupported");
  }
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("RealArray", "RealArray: zero-length dimension in " + shape_string(shape_));
  }
  if (element_count(shape_) != values_.size()) {
    throw ShapeError("RealArray", "RealArray: shape " + shape_string(shape_) + " expects " +
                                      std::to_string(element_count(shape_)) + " values, got " +
                                      std::to_string(values_.size()));
  }
  if (!all_finite()) throw NumericalError("RealArray: non-finite value");
}

RealArray RealArray::zeros(Shape shape) {
  const std::size_t n = element_count(shape);
  return RealArray(std::move(shape), std::vector<double>(n, 0.0));
}

RealArray RealArray::scalar(double value) { return RealArray({}, {value}); }

RealArray RealArray::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return RealArray({n}, std::move(values));
}

RealArray RealArray::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return RealArray({rows, cols}, std::move(values));
}

std::size_t RealArray::rows() const { return rows_of(shape_); }
std::size_t RealArray::cols() const { return cols_of(shape_); }

double RealArray::item() const {
  if (values_.size() != 1) throw ShapeError("item", "item: array of shape " + shape_string(shape_) + " is not a scalar");
  return values_[0];
}

bool RealArray::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kClamp: return "clamp";
    case Op::kEmbedding: return "embedding";
    case Op::kPick: return "pick";
    case Op::kSum: return "sum";
    case Op::kStack: return "stack";
    case Op::kSlice: return "slice";
  }
  return "unknown";
}

// --- Graph construction ---------------------------------------------------

NodeId Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Graph::check_operand(NodeId id, const char* op) const {
  if (id.index >= nodes_.size()) {
    throw ShapeError(op, std::string(op) + ": operand " + std::to_string(id.index) + " does not exist");
  }
}

Shape Graph::broadcast_shape(const char* op, NodeId a, NodeId b) const {
  check_operand(a, op);
  check_operand(b, op);
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa == sb || sb.empty()) return sa;
  if (sb.size() == 1 && !sa.empty() && sa.back() == sb[0]) return sa;
  throw ShapeError(op, std::string(op) + ": expected " + shape_string(sa) + " or a broadcastable right operand, got " +
                           shape_string(sb));
}

NodeId Graph::input(const std::string& name, Shape shape) {
  if (inputs_.count(name)) throw ShapeError("input", "input: duplicate input name '" + name + "'");
  RealArray::zeros(shape);  // validates the shape
  Node n;
  n.op = Op::kInput;
  n.shape = std::move(shape);
  n.name = name;
  const NodeId id = push(std::move(n));
  inputs_.emplace(name, id);
  return id;
}

NodeId Graph::constant(RealArray value) {
  Node n;
  n.op = Op::kConstant;
  n.shape = value.shape();
  n.constant = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  check_operand(a, "matmul");
  check_operand(b, "matmul");
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul", "matmul: expected [m, n] x [n, p], got " + shape_string(sa) + " x " + shape_string(sb));
  }
  Node n;
  n.op = Op::kMatMul;
  n.operands = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kAdd;
  n.shape = broadcast_shape("add", a, b);
  n.operands = {a, b};
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kSub;
  n.shape = broadcast_shape("sub", a, b);
  n.operands = {a, b};
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kMul;
  n.shape = broadcast_shape("mul", a, b);
  n.operands = {a, b};
  return push(std::move(n));
}

namespace {
Node unary(Op op, NodeId a, const Shape& shape) {
  Node n;
  n.op = op;
  n.operands = {a};
  n.shape = shape;
  return n;
}
}  // namespace

NodeId Graph::scale(NodeId a, double factor) {
  check_operand(a, "scale");
  Node n = unary(Op::kScale, a, shape(a));
  n.param0 = factor;
  return push(std::move(n));
}

NodeId Graph::add_scalar(NodeId a, double value) {
  check_operand(a, "add_scalar");
  Node n = unary(Op::kAddScalar, a, shape(a));
  n.param0 = value;
  return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId a) {
  check_operand(a, "sigmoid");
  return push(unary(Op::kSigmoid, a, shape(a)));
}

NodeId Graph::tanh(NodeId a) {
  check_operand(a, "tanh");
  return push(unary(Op::kTanh, a, shape(a)));
}

NodeId Graph::log(NodeId a) {
  check_operand(a, "log");
  return push(unary(Op::kLog, a, shape(a)));
}

NodeId Graph::exp(NodeId a) {
  check_operand(a, "exp");
  return push(unary(Op::kExp, a, shape(a)));
}

NodeId Graph::softmax(NodeId a) {
  check_operand(a, "softmax");
  if (shape(a).empty()) throw ShapeError("softmax", "softmax: expected a vector or matrix, got a scalar");
  return push(unary(Op::kSoftmax, a, shape(a)));
}

NodeId Graph::log_softmax(NodeId a) {
  check_operand(a, "log_softmax");
  if (shape(a).empty()) throw ShapeError("log_softmax", "log_softmax: expected a vector or matrix, got a scalar");
  return push(unary(Op::kLogSoftmax, a, shape(a)));
}

NodeId Graph::clamp(NodeId a, double lo, double hi) {
  check_operand(a, "clamp");
  if (!(lo < hi)) throw ShapeError("clamp", "clamp: lower bound must be below upper bound");
  Node n = unary(Op::kClamp, a, shape(a));
  n.param0 = lo;
  n.param1 = hi;
  return push(std::move(n));
}

NodeId Graph::embedding(NodeId table, NodeId indices) {
  check_operand(table, "embedding");
  check_operand(indices, "embedding");
  const Shape& st = shape(table);
  const Shape& si = shape(indices);
  if (st.size() != 2 || si.size() != 1) {
    throw ShapeError("embedding", "embedding: expected table [V, E] and indices [B], got " + shape_string(st) +
                                      " and " + shape_string(si));
  }
  Node n;
  n.op = Op::kEmbedding;
  n.operands = {table, indices};
  n.shape = {si[0], st[1]};
  return push(std::move(n));
}

NodeId Graph::pick(NodeId a, NodeId indices) {
  check_operand(a, "pick");
  check_operand(indices, "pick");
  const Shape& sa = shape(a);
  const Shape& si = shape(indices);
  if (sa.size() != 2 || si.size() != 1 || si[0] != sa[0]) {
    throw ShapeError("pick", "pick: expected [B, V] and indices [B], got " + shape_string(sa) + " and " +
                                 shape_string(si));
  }
  Node n;
  n.op = Op::kPick;
  n.operands = {a, indices};
  n.shape = {sa[0]};
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  check_operand(a, "sum");
  return push(unary(Op::kSum, a, {}));
}

NodeId Graph::mean(NodeId a) {
  check_operand(a, "mean");
  const double n = static_cast<double>(element_count(shape(a)));
  return scale(sum(a), 1.0 / n);
}

NodeId Graph::stack(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ShapeError("stack", "stack: no operands");
  Shape out;
  for (NodeId p : parts) {
    check_operand(p, "stack");
    const Shape& s = shape(p);
    if (s.empty()) throw ShapeError("stack", "stack: scalar operand");
    if (out.empty()) {
      out = s;
      continue;
    }
    if (s.size() != out.size() || (s.size() == 2 && s[0] != out[0])) {
      throw ShapeError("stack", "stack: expected leading shape compatible with " + shape_string(out) + ", got " +
                                    shape_string(s));
    }
    out.back() += s.back();
  }
  Node n;
  n.op = Op::kStack;
  n.operands = parts;
  n.shape = out;
  return push(std::move(n));
}

NodeId Graph::slice(NodeId a, std::size_t begin, std::size_t count) {
  check_operand(a, "slice");
  Shape s = shape(a);
  if (s.empty() || count == 0 || begin + count > s.back()) {
    throw ShapeError("slice", "slice: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                  ") outside " + shape_string(s));
  }
  s.back() = count;
  Node n = unary(Op::kSlice, a, s);
  n.offset = begin;
  return push(std::move(n));
}

NodeId Graph::input_id(const std::string& name) const { return inputs_.at(name); }

bool Graph::has_input(const std::string& name) const { return inputs_.count(name) > 0; }

Inputs& Inputs::bind(const std::string& name, const RealArray& value) {
  bound_[name] = &value;
  return *this;
}

const RealArray* Inputs::find(const std::string& name) const {
  auto it = bound_.find(name);
  return it == bound_.end() ? nullptr : it->second;
}

// --- Forward --------------------------------------------------------------

namespace {

void row_softmax(const RealArray& in, RealArray& out, bool take_log) {
  const std::size_t rows = in.rows();
  const std::size_t cols = in.cols();
  auto x = in.values();
  auto y = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    const double peak = *std::max_element(xr, xr + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(xr[c] - peak);
    if (take_log) {
      const double log_total = std::log(total) + peak;
      for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - log_total;
    } else {
      for (std::size_t c = 0; c < cols; ++c) yr[c] = std::exp(xr[c] - peak) / total;
    }
  }
}

RealArray compute(const Node& node, const std::vector<const RealArray*>& view) {
  auto operand = [&](std::size_t k) -> const RealArray& { return *view[node.operands[k].index]; };
  RealArray out = RealArray::zeros(node.shape);
  auto y = out.mutable_values();

  switch (node.op) {
    case Op::kInput:
    case Op::kConstant:
      break;
    case Op::kMatMul:
      as_matrix(out).noalias() = as_matrix(operand(0)) * as_matrix(operand(1));
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      auto a = operand(0).values();
      auto b = operand(1).values();
      if (node.op == Op::kAdd) {
        for (std::size_t j = 0; j < y.size(); ++j) y[j] = a[j] + broadcast_at(b, j);
      } else if (node.op == Op::kSub) {
        for (std::size_t j = 0; j < y.size(); ++j) y[j] = a[j] - broadcast_at(b, j);
      } else {
        for (std::size_t j = 0; j < y.size(); ++j) y[j] = a[j] * broadcast_at(b, j);
      }
      break;
    }
    case Op::kScale: {
      auto a = operand(0).values();
      for (std::size_t j = 0; j < y.size(); ++j) y[j] = a[j] * node.param0;
      break;
    }
    case Op::kAddScalar: {
      auto a = operand(0).values();
      for (std::size_t j = 0; j < y.size(); ++j) y[j] = a[j] + node.param0;
      break;
    }
    case Op::kSigmoid: {
      auto a = operand(0).values();
      for (std::size_t j = 0; j < y.size(); ++j) y[j] = sigmoid_scalar(a[j]);
      break;
    }
    case Op::kTanh: {
      auto a = operand(0).values();
      for (std::size_t j = 0; j < y.size(); ++j) y[j] = std::tanh(a[j]);
      break;
    }
    case Op::kLog: {
      auto a = operand(0).values();
      for (std::size_t j = 0; j < y.size(); ++j) y[j] = std::log(a[j]);
      break;
    }
    case Op::kExp: {
      auto a = operand(0).values();
      for (std::size_t j = 0; j < y.size(); ++j) y[j] = std::exp(a[j]);
      break;
    }
    case Op::kSoftmax:
      row_softmax(operand(0), out, false);
      break;
    case Op::kLogSoftmax:
      row_softmax(operand(0), out, true);
      break;
    case Op::kClamp: {
      auto a = operand(0).values();
      for (std::size_t j = 0; j < y.size(); ++j) y[j] = std::clamp(a[j], node.param0, node.param1);
      break;
    }
    case Op::kEmbedding: {
      const RealArray& table = operand(0);
      auto idx = operand(1).values();
      const std::size_t width = table.cols();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const std::size_t row = checked_index(idx[r], table.rows(), "embedding");
        std::copy_n(table.values().data() + row * width, width, y.data() + r * width);
      }
      break;
    }
    case Op::kPick: {
      const RealArray& a = operand(0);
      auto idx = operand(1).values();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        y[r] = a.at(r, checked_index(idx[r], a.cols(), "pick"));
      }
      break;
    }
    case Op::kSum: {
      auto a = operand(0).values();
      y[0] = std::accumulate(a.begin(), a.end(), 0.0);
      break;
    }
    case Op::kStack: {
      const std::size_t rows = out.rows();
      const std::size_t cols = out.cols();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.operands.size(); ++k) {
        const RealArray& part = operand(k);
        const std::size_t w = part.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(part.values().data() + r * w, w, y.data() + r * cols + offset);
        }
        offset += w;
      }
      break;
    }
    case Op::kSlice: {
      const RealArray& a = operand(0);
      const std::size_t rows = out.rows();
      const std::size_t w = out.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.values().data() + r * a.cols() + node.offset, w, y.data() + r * w);
      }
      break;
    }
  }
  return out;
}

}  // namespace

Evaluation evaluate(const Graph& graph, const Inputs& inputs) {
  Evaluation ev;
  const auto& nodes = graph.nodes();
  ev.owned_.resize(nodes.size());
  ev.view_.resize(nodes.size(), nullptr);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& node = nodes[i];
    if (node.op == Op::kInput) {
      const RealArray* bound = inputs.find(node.name);
      if (!bound) throw ShapeError("evaluate", "evaluate: input '" + node.name + "' not bound");
      if (bound->shape() != node.shape) {
        throw ShapeError("evaluate", "evaluate: input '" + node.name + "' expected shape " + shape_string(node.shape) +
                                         ", got " + shape_string(bound->shape()));
      }
      ev.view_[i] = bound;
      continue;
    }
    if (node.op == Op::kConstant) {
      ev.view_[i] = &node.constant;
      continue;
    }
    ev.owned_[i] = compute(node, ev.view_);
    if (!ev.owned_[i].all_finite()) {
      throw NumericalError(std::string(op_name(node.op)) + ": non-finite output at node " + std::to_string(i));
    }
    ev.view_[i] = &ev.owned_[i];
  }
  return ev;
}

// --- Backward -------------------------------------------------------------

Gradients backpropagate(const Graph& graph, const Evaluation& ev, NodeId output, const std::set<std::string>& wrt) {
  const auto& nodes = graph.nodes();
  if (output.index >= nodes.size()) throw ShapeError("backpropagate", "backpropagate: unknown output node");
  if (!graph.shape(output).empty()) {
    throw ShapeError("backpropagate", "backpropagate: output must be a scalar, got shape " +
                                          shape_string(graph.shape(output)));
  }
  for (const auto& name : wrt) {
    if (!graph.has_input(name)) throw ShapeError("backpropagate", "backpropagate: no input named '" + name + "'");
  }

  // A node needs a gradient when some requested input flows into it.
  std::vector<char> needed(nodes.size(), 0);
  for (std::size_t i = 0; i <= output.index; ++i) {
    const Node& node = nodes[i];
    if (node.op == Op::kInput) {
      needed[i] = wrt.count(node.name) ? 1 : 0;
      continue;
    }
    for (NodeId o : node.operands) {
      if (needed[o.index]) {
        needed[i] = 1;
        break;
      }
    }
  }

  std::vector<RealArray> grad(nodes.size());
  std::vector<char> has_grad(nodes.size(), 0);
  auto touch = [&](NodeId id) -> RealArray& {
    if (!has_grad[id.index]) {
      grad[id.index] = RealArray::zeros(nodes[id.index].shape);
      has_grad[id.index] = 1;
    }
    return grad[id.index];
  };

  if (needed[output.index]) touch(output)[0] = 1.0;

  for (std::size_t i = output.index + 1; i-- > 0;) {
    if (!has_grad[i] || !needed[i]) continue;
    const Node& node = nodes[i];
    if (node.op == Op::kInput || node.op == Op::kConstant) continue;
    const RealArray& g = grad[i];
    const RealArray& y = ev.value(NodeId{static_cast<std::uint32_t>(i)});
    auto gv = g.values();
    auto yv = y.values();
    auto operand_value = [&](std::size_t k) -> const RealArray& { return ev.value(node.operands[k]); };
    auto wants = [&](std::size_t k) { return needed[node.operands[k].index] != 0; };

    switch (node.op) {
      case Op::kInput:
      case Op::kConstant:
        break;
      case Op::kMatMul:
        if (wants(0)) as_matrix(touch(node.operands[0])).noalias() += as_matrix(g) * as_matrix(operand_value(1)).transpose();
        if (wants(1)) as_matrix(touch(node.operands[1])).noalias() += as_matrix(operand_value(0)).transpose() * as_matrix(g);
        break;
      case Op::kAdd:
        if (wants(0)) accumulate_broadcast(touch(node.operands[0]), g, nullptr);
        if (wants(1)) accumulate_broadcast(touch(node.operands[1]), g, nullptr);
        break;
      case Op::kSub:
        if (wants(0)) accumulate_broadcast(touch(node.operands[0]), g, nullptr);
        if (wants(1)) {
          RealArray neg = g;
          for (double& v : neg.mutable_values()) v = -v;
          accumulate_broadcast(touch(node.operands[1]), neg, nullptr);
        }
        break;
      case Op::kMul: {
        auto a = operand_value(0).values();
        auto b = operand_value(1).values();
        if (wants(0)) {
          auto out = touch(node.operands[0]).mutable_values();
          for (std::size_t j = 0; j < gv.size(); ++j) out[j] += gv[j] * broadcast_at(b, j);
        }
        if (wants(1)) {
          std::vector<double> weights(a.begin(), a.end());
          accumulate_broadcast(touch(node.operands[1]), g, &weights);
        }
        break;
      }
      case Op::kScale: {
        auto out = touch(node.operands[0]).mutable_values();
        for (std::size_t j = 0; j < gv.size(); ++j) out[j] += gv[j] * node.param0;
        break;
      }
      case Op::kAddScalar: {
        auto out = touch(node.operands[0]).mutable_values();
        for (std::size_t j = 0; j < gv.size(); ++j) out[j] += gv[j];
        break;
      }
      case Op::kSigmoid: {
        auto out = touch(node.operands[0]).mutable_values();
        for (std::size_t j = 0; j < gv.size(); ++j) out[j] += gv[j] * yv[j] * (1.0 - yv[j]);
        break;
      }
      case Op::kTanh: {
        auto out = touch(node.operands[0]).mutable_values();
        for (std::size_t j = 0; j < gv.size(); ++j) out[j] += gv[j] * (1.0 - yv[j] * yv[j]);
        break;
      }
      case Op::kLog: {
        auto a = operand_value(0).values();
        auto out = touch(node.operands[0]).mutable_values();
        for (std::size_t j = 0; j < gv.size(); ++j) out[j] += gv[j] / a[j];
        break;
      }
      case Op::kExp: {
        auto out = touch(node.operands[0]).mutable_values();
        for (std::size_t j = 0; j < gv.size(); ++j) out[j] += gv[j] * yv[j];
        break;
      }
      case Op::kSoftmax: {
        auto out = touch(node.operands[0]).mutable_values();
        const std::size_t rows = y.rows();
        const std::size_t cols = y.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += gv[r * cols + c] * yv[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t j = r * cols + c;
            out[j] += yv[j] * (gv[j] - dot);
          }
        }
        break;
      }
      case Op::kLogSoftmax: {
        auto out = touch(node.operands[0]).mutable_values();
        const std::size_t rows = y.rows();
        const std::size_t cols = y.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          double total = 0.0;
          for (std::size_t c = 0; c < cols; ++c) total += gv[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t j = r * cols + c;
            out[j] += gv[j] - std::exp(yv[j]) * total;
          }
        }
        break;
      }
      case Op::kClamp: {
        auto a = operand_value(0).values();
        auto out = touch(node.operands[0]).mutable_values();
        for (std::size_t j = 0; j < gv.size(); ++j) {
          if (a[j] > node.param0 && a[j] < node.param1) out[j] += gv[j];
        }
        break;
      }
      case Op::kEmbedding: {
        if (!wants(0)) break;
        RealArray& table_grad = touch(node.operands[0]);
        auto idx = operand_value(1).values();
        const std::size_t width = table_grad.cols();
        auto out = table_grad.mutable_values();
        for (std::size_t r = 0; r < idx.size(); ++r) {
          const auto row = static_cast<std::size_t>(idx[r]);
          for (std::size_t c = 0; c < width; ++c) out[row * width + c] += gv[r * width + c];
        }
        break;
      }
      case Op::kPick: {
        if (!wants(0)) break;
        RealArray& a_grad = touch(node.operands[0]);
        auto idx = operand_value(1).values();
        const std::size_t cols = a_grad.cols();
        auto out = a_grad.mutable_values();
        for (std::size_t r = 0; r < idx.size(); ++r) out[r * cols + static_cast<std::size_t>(idx[r])] += gv[r];
        break;
      }
      case Op::kSum: {
        auto out = touch(node.operands[0]).mutable_values();
        for (double& v : out) v += gv[0];
        break;
      }
      case Op::kStack: {
        const std::size_t rows = y.rows();
        const std::size_t cols = y.cols();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < node.operands.size(); ++k) {
          const std::size_t w = graph.shape(node.operands[k]).back();
          if (wants(k)) {
            auto out = touch(node.operands[k]).mutable_values();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < w; ++c) out[r * w + c] += gv[r * cols + offset + c];
            }
          }
          offset += w;
        }
        break;
      }
      case Op::kSlice: {
        RealArray& a_grad = touch(node.operands[0]);
        auto out = a_grad.mutable_values();
        const std::size_t rows = y.rows();
        const std::size_t w = y.cols();
        const std::size_t cols = a_grad.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < w; ++c) out[r * cols + node.offset + c] += gv[r * w + c];
        }
        break;
      }
    }
  }

  Gradients result;
  for (const auto& name : wrt) {
    const NodeId id = graph.input_id(name);
    if (has_grad[id.index]) {
      result.by_input.emplace(name, std::move(grad[id.index]));
    } else {
      result.by_input.emplace(name, RealArray::zeros(nodes[id.index].shape));
      result.detached.push_back(name);
    }
  }
  return result;
}

double finite_difference_check(const Graph& graph, const Inputs& inputs, NodeId output, const std::string& input,
                               double epsilon, double abs_floor) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_difference_check: epsilon must be positive");
  const RealArray* bound = inputs.find(input);
  if (!bound) throw ShapeError("finite_difference_check", "finite_difference_check: input '" + input + "' not bound");

  const Evaluation base = evaluate(graph, inputs);
  const Gradients grads = backpropagate(graph, base, output, {input});
  const RealArray& analytic = grads[input];

  RealArray probe = *bound;
  Inputs shifted = inputs;
  shifted.bind(input, probe);
  double worst = 0.0;
  for (std::size_t j = 0; j < probe.size(); ++j) {
    const double original = probe[j];
    probe[j] = original + epsilon;
    const double up = evaluate(graph, shifted).value(output).item();
    probe[j] = original - epsilon;
    const double down = evaluate(graph, shifted).value(output).item();
    probe[j] = original;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double err = std::abs(analytic[j] - numeric) / (std::abs(analytic[j]) + abs_floor);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace neuroflip::autodiff
