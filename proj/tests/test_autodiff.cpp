#include "neuroflip/autodiff.hpp"
#include "neuroflip/lstm_lm.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

#include <catch_amalgamated.hpp>

#include <map>
#include <random>

using namespace neuroflip::autodiff;
using Catch::Approx;

using namespace gradcheck;

TEST_CASE("RealArray rejects inconsistent shapes and non-finite values", "[autodiff]") {
  CHECK_THROWS_AS(RealArray({2, 3}, std::vector<double>(5, 0.0)), ShapeError);
  CHECK_THROWS_AS(RealArray::vector({1.0, std::nan("")}), NumericalError);
  CHECK_THROWS_AS(RealArray::vector({INFINITY}), NumericalError);
  const RealArray m = RealArray::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 3);
  CHECK(m.at(1, 2) == 6.0);
}

TEST_CASE("forward examples", "[autodiff]") {
  Graph g;
  const NodeId x = g.input("x", {4});
  const NodeId sig = g.sigmoid(x);
  const NodeId soft = g.softmax(x);
  const NodeId cl = g.clamp(x, 0.0, 1.0);
  const RealArray xv = RealArray::vector({0.0, 0.0, 0.0, 0.0});
  const RealArray cv = RealArray::vector({1.7, -0.3, 0.5, 0.0});
  {
    Inputs in;
    in.bind("x", xv);
    const Evaluation ev = evaluate(g, in);
    CHECK(ev.value(sig)[0] == 0.5);
    for (std::size_t j = 0; j < 4; ++j) CHECK(ev.value(soft)[j] == Approx(0.25).margin(1e-15));
  }
  Inputs in;
  in.bind("x", cv);
  const Evaluation ev = evaluate(g, in);
  CHECK(ev.value(cl)[0] == 1.0);
  CHECK(ev.value(cl)[1] == 0.0);
  CHECK(ev.value(cl)[2] == 0.5);
}

TEST_CASE("backward examples", "[autodiff]") {
  Graph g;
  const NodeId x = g.input("x", {});
  const NodeId s = g.sigmoid(x);
  const NodeId sq = g.mul(x, x);
  const NodeId cl = g.clamp(x, 0.0, 1.0);

  const RealArray zero = RealArray::scalar(0.0), three = RealArray::scalar(3.0);
  const RealArray outside = RealArray::scalar(1.5), inside = RealArray::scalar(0.5), edge = RealArray::scalar(1.0);
  auto grad_at = [&](NodeId out, const RealArray& v) {
    Inputs in;
    in.bind("x", v);
    const Evaluation ev = evaluate(g, in);
    return backpropagate(g, ev, out, {"x"})["x"].item();
  };
  CHECK(grad_at(s, zero) == 0.25);
  CHECK(grad_at(sq, three) == 6.0);
  CHECK(grad_at(cl, outside) == 0.0);
  CHECK(grad_at(cl, inside) == 1.0);
  CHECK(grad_at(cl, edge) == 0.0);
}

TEST_CASE("every primitive matches central differences", "[autodiff]") {
  std::mt19937_64 rng(2024);
  using Builder = std::function<NodeId(Graph&, NodeId, NodeId)>;
  struct Case {
    const char* name;
    Shape a, b;
    Builder build;
    bool binary = false;
    bool positive_a = false;
  };
  const std::vector<Case> cases = {
      {"matmul", {3, 4}, {4, 2}, [](Graph& g, NodeId a, NodeId b) { return g.matmul(a, b); }, true},
      {"add", {3, 4}, {3, 4}, [](Graph& g, NodeId a, NodeId b) { return g.add(a, b); }, true},
      {"add broadcast row", {3, 4}, {4}, [](Graph& g, NodeId a, NodeId b) { return g.add(a, b); }, true},
      {"sub", {3, 4}, {}, [](Graph& g, NodeId a, NodeId b) { return g.sub(a, b); }, true},
      {"mul", {3, 4}, {3, 4}, [](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); }, true},
      {"mul broadcast", {3, 4}, {4}, [](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); }, true},
      {"scale", {5}, {1}, [](Graph& g, NodeId a, NodeId) { return g.scale(a, -1.7); }},
      {"add_scalar", {5}, {1}, [](Graph& g, NodeId a, NodeId) { return g.add_scalar(a, 0.3); }},
      {"sigmoid", {3, 4}, {1}, [](Graph& g, NodeId a, NodeId) { return g.sigmoid(a); }},
      {"tanh", {3, 4}, {1}, [](Graph& g, NodeId a, NodeId) { return g.tanh(a); }},
      {"log", {6}, {1}, [](Graph& g, NodeId a, NodeId) { return g.log(a); }, false, true},
      {"exp", {6}, {1}, [](Graph& g, NodeId a, NodeId) { return g.exp(a); }},
      {"softmax rows", {3, 5}, {1}, [](Graph& g, NodeId a, NodeId) { return g.softmax(a); }},
      {"softmax vector", {5}, {1}, [](Graph& g, NodeId a, NodeId) { return g.softmax(a); }},
      {"log_softmax", {3, 5}, {1}, [](Graph& g, NodeId a, NodeId) { return g.log_softmax(a); }},
      {"sum", {3, 5}, {1}, [](Graph& g, NodeId a, NodeId) { return g.sum(a); }},
      {"mean", {3, 5}, {1}, [](Graph& g, NodeId a, NodeId) { return g.mean(a); }},
      {"stack", {3, 2}, {3, 4}, [](Graph& g, NodeId a, NodeId b) { return g.stack({a, b, a}); }, true},
      {"slice", {3, 6}, {1}, [](Graph& g, NodeId a, NodeId) { return g.slice(a, 2, 3); }},
  };
  for (const auto& c : cases) {
    DYNAMIC_SECTION(c.name) {
      Graph g;
      const NodeId a = g.input("a", c.a);
      const NodeId b = g.input("b", c.b.empty() ? Shape{} : c.b);
      const NodeId y = c.build(g, a, b);
      const NodeId loss = g.shape(y).empty() ? g.mul(y, y) : weighted_sum(g, y, rng);
      Bindings bind{{"a", c.positive_a ? random_array(c.a, rng, 0.2, 2.0) : random_array(c.a, rng)},
                    {"b", random_array(c.b, rng)}};
      CHECK(max_relative_error(g, loss, bind, "a") < 1e-4);
      const Gradients gr = backpropagate(g, evaluate(g, bind_all(bind)), loss, {"a", "b"});
      CHECK(gr["a"].shape() == bind.at("a").shape());
      CHECK(gr["b"].shape() == bind.at("b").shape());
      if (c.binary) CHECK(max_relative_error(g, loss, bind, "b") < 1e-4);
    }
  }
}

TEST_CASE("clamp gradient away from the kinks", "[autodiff]") {
  Graph g;
  const NodeId a = g.input("a", {8});
  const NodeId y = g.clamp(a, -0.5, 0.5);
  std::mt19937_64 rng(3);
  const NodeId loss = weighted_sum(g, y, rng);
  // Points at least 10 * eps from either bound.
  Bindings bind{{"a", RealArray::vector({-1.2, -0.7, -0.4, -0.1, 0.05, 0.3, 0.45, 1.9})}};
  CHECK(max_relative_error(g, loss, bind, "a", 1e-6) < 1e-4);
}

TEST_CASE("embedding lookup scatter-adds repeated rows", "[autodiff]") {
  Graph g;
  const NodeId table = g.input("table", {4, 3});
  const NodeId idx = g.input("idx", {5});
  const NodeId rows = g.embedding(table, idx);
  const NodeId loss = g.sum(rows);
  Bindings bind{{"table", RealArray::matrix(4, 3, std::vector<double>(12, 0.1))},
                {"idx", RealArray::vector({2, 0, 2, 2, 3})}};
  const Gradients gr = backpropagate(g, evaluate(g, bind_all(bind)), loss, {"table"});
  const std::vector<double> counts{1, 0, 3, 1};
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(gr["table"].at(r, c) == counts[r]);
  }
  std::mt19937_64 rng(5);
  bind.at("table") = random_array({4, 3}, rng);
  const NodeId wl = weighted_sum(g, rows, rng);
  CHECK(max_relative_error(g, wl, bind, "table") < 1e-4);
}

TEST_CASE("pick selects one column per row", "[autodiff]") {
  Graph g;
  const NodeId a = g.input("a", {3, 4});
  const NodeId idx = g.input("idx", {3});
  const NodeId p = g.pick(a, idx);
  std::mt19937_64 rng(9);
  Bindings bind{{"a", random_array({3, 4}, rng)}, {"idx", RealArray::vector({3, 0, 1})}};
  const Evaluation ev = evaluate(g, bind_all(bind));
  CHECK(ev.value(p)[0] == bind.at("a").at(0, 3));
  CHECK(ev.value(p)[2] == bind.at("a").at(2, 1));
  CHECK(max_relative_error(g, weighted_sum(g, p, rng), bind, "a") < 1e-4);
}

TEST_CASE("softmax rows are distributions", "[autodiff]") {
  Graph g;
  const NodeId a = g.input("a", {6, 9});
  const NodeId s = g.softmax(a);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const RealArray v = random_array({6, 9}, rng, -30.0, 30.0);
    Inputs in;
    in.bind("a", v);
    const Evaluation ev = evaluate(g, in);
    for (std::size_t r = 0; r < 6; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        CHECK(ev.value(s).at(r, c) >= 0.0);
        total += ev.value(s).at(r, c);
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("replaying a record is bit-identical", "[autodiff]") {
  Graph g;
  const NodeId a = g.input("a", {4, 5});
  const NodeId w = g.input("w", {5, 3});
  const NodeId y = g.sum(g.log_softmax(g.tanh(g.matmul(a, w))));
  std::mt19937_64 rng(1);
  Bindings bind{{"a", random_array({4, 5}, rng)}, {"w", random_array({5, 3}, rng)}};
  const Evaluation e1 = evaluate(g, bind_all(bind));
  const Evaluation e2 = evaluate(g, bind_all(bind));
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(e1.value(NodeId{static_cast<std::uint32_t>(i)}) == e2.value(NodeId{static_cast<std::uint32_t>(i)}));
  const auto g1 = backpropagate(g, e1, y, {"a", "w"});
  const auto g2 = backpropagate(g, e2, y, {"a", "w"});
  CHECK(g1["w"] == g2["w"]);
}

TEST_CASE("structured errors", "[autodiff]") {
  Graph g;
  const NodeId a = g.input("a", {2, 3});
  const NodeId b = g.input("b", {2, 3});
  try {
    g.matmul(a, b);
    FAIL("matmul accepted incompatible shapes");
  } catch (const ShapeError& e) {
    CHECK(e.op() == "matmul");
    CHECK(std::string(e.what()).find("[2, 3]") != std::string::npos);
  }
  const NodeId y = g.add(a, b);
  const RealArray good = RealArray::matrix(2, 3, std::vector<double>(6, 1.0));
  const RealArray bad = RealArray::vector({1.0, 2.0});
  Inputs in;
  in.bind("a", good).bind("b", bad);
  try {
    (void)evaluate(g, in);
    FAIL("evaluate accepted a mis-shaped input");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
  Inputs ok;
  ok.bind("a", good).bind("b", good);
  const Evaluation ev = evaluate(g, ok);
  CHECK_THROWS_AS(backpropagate(g, ev, y, {"a"}), ShapeError);
  Inputs missing;
  missing.bind("a", good);
  CHECK_THROWS_AS(evaluate(g, missing), ShapeError);
  CHECK_THROWS_AS(g.input("a", {1}), ShapeError);
}

TEST_CASE("log of zero is a numerical error", "[autodiff]") {
  Graph g;
  const NodeId a = g.input("a", {2});
  g.log(a);
  const RealArray v = RealArray::vector({1.0, 0.0});
  Inputs in;
  in.bind("a", v);
  CHECK_THROWS_AS(evaluate(g, in), NumericalError);
}

TEST_CASE("detached inputs get a zero gradient and a flag", "[autodiff]") {
  Graph g;
  const NodeId a = g.input("a", {3});
  g.input("unused", {2});
  const NodeId y = g.sum(g.mul(a, a));
  const RealArray av = RealArray::vector({1, 2, 3});
  const RealArray uv = RealArray::vector({4, 5});
  Inputs in;
  in.bind("a", av).bind("unused", uv);
  const Evaluation ev = evaluate(g, in);
  const Gradients only_a = backpropagate(g, ev, y, {"a"});
  CHECK(only_a.by_input.count("unused") == 0);
  CHECK_FALSE(only_a.has_detached());
  const Gradients both = backpropagate(g, ev, y, {"a", "unused"});
  REQUIRE(both.has_detached());
  CHECK(both.detached == std::vector<std::string>{"unused"});
  CHECK(both["unused"] == RealArray::zeros({2}));
  CHECK(both["a"] == RealArray::vector({2, 4, 6}));
}

TEST_CASE("finite_difference_check examples", "[autodiff]") {
  SECTION("quadratic") {
    Graph g;
    const NodeId x = g.input("x", {5});
    const NodeId c = g.constant(RealArray::vector({1, -2, 3, 0.5, -1}));
    const NodeId d = g.sub(x, c);
    const NodeId y = g.sum(g.mul(d, d));
    const RealArray xv = RealArray::vector({0.3, 0.1, -0.7, 1.2, 2.0});
    Inputs in;
    in.bind("x", xv);
    CHECK(finite_difference_check(g, in, y, "x", 1e-5) < 1e-6);
  }
  SECTION("constant output") {
    Graph g;
    const NodeId x = g.input("x", {3});
    g.mul(x, x);
    const NodeId y = g.sum(g.constant(RealArray::vector({1, 2, 3})));
    const RealArray xv = RealArray::vector({1, 2, 3});
    Inputs in;
    in.bind("x", xv);
    CHECK(backpropagate(g, evaluate(g, in), y, {"x"})["x"] == RealArray::zeros({3}));
    CHECK(finite_difference_check(g, in, y, "x", 1e-5) == 0.0);
  }
  SECTION("epsilon must be positive") {
    Graph g;
    const NodeId x = g.input("x", {});
    const NodeId y = g.mul(x, x);
    const RealArray xv = RealArray::scalar(1.0);
    Inputs in;
    in.bind("x", xv);
    CHECK_THROWS_AS(finite_difference_check(g, in, y, "x", 0.0), std::invalid_argument);
  }
}

TEST_CASE("LSTM step loss gradient", "[autodiff]") {
  using namespace neuroflip::lm;
  const auto model = oracle::tiny_model({"a", "b", "c", "d"}, 8, 5, 3, 0.5);
  Graph g;
  const SequenceGraph seq = build_sequence_graph(g, model.config, 2, 3);
  // Cross-entropy of the token after the last step.
  const NodeId next = g.input("next", {2});
  const NodeId loss = g.scale(g.sum(g.pick(g.log_softmax(seq.logits.back()), next)), -1.0);
  Inputs in;
  bind_parameters(in, model.params);
  std::vector<RealArray> tokens;
  for (std::size_t s = 0; s < 3; ++s) tokens.push_back(RealArray::vector({static_cast<double>(2 + s % 2), 4.0 - static_cast<double>(s)}));
  for (std::size_t s = 0; s < 3; ++s) in.bind(token_input_name(s + 1), tokens[s]);
  const RealArray next_v = RealArray::vector({3, 2});
  in.bind("next", next_v);
  for (const auto& [name, array] : model.params.named()) {
    (void)array;
    INFO(name);
    CHECK(finite_difference_check(g, in, loss, name, 1e-4, 1e-6) < 1e-4);
  }
}
