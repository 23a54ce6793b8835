#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "treefix/expr.hpp"
#include "test_util.hpp"

using namespace treefix;

TEST_CASE("prefix parsing builds the expected structure", "[expr]") {
  ExprTree t = parse_prefix_string("* / n0 n1 + n1 n2");
  REQUIRE(t.size() == 7);
  REQUIRE(t.tokens[0].op == Op::Mul);
  REQUIRE(t.left[0] == 1);
  REQUIRE(t.right[0] == 4);
  REQUIRE(t.is_leaf(2));
  REQUIRE(to_prefix_string(t) == "* / n0 n1 + n1 n2");

  ExprTree leaf = parse_prefix_string("n0");
  REQUIRE(leaf.size() == 1);
  REQUIRE(leaf.is_leaf(0));

  ExprTree pi_leaf = parse_prefix_string("pi");
  REQUIRE(to_prefix_string(pi_leaf) == "pi");
}

TEST_CASE("prefix parsing rejects malformed sequences", "[expr]") {
  REQUIRE_THROWS_AS(parse_prefix_string("+ n0"), ParseError);
  REQUIRE_THROWS_AS(parse_prefix_string(""), ParseError);
  REQUIRE_THROWS_AS(parse_prefix_string("n0 n1"), ParseError);

  try {
    parse_prefix_string("+ n0");
    FAIL("expected throw");
  } catch (const ParseError& e) {
    REQUIRE(e.kind() == ParseError::Kind::Incomplete);
  }
  try {
    parse_prefix_string("n0 n1");
    FAIL("expected throw");
  } catch (const ParseError& e) {
    REQUIRE(e.kind() == ParseError::Kind::TrailingTokens);
  }
}

TEST_CASE("round-trip law over random trees", "[expr]") {
  std::mt19937_64 rng(41);
  Vocab vocab = Vocab::standard(3);
  for (int iter = 0; iter < 500; ++iter) {
    int size = 1 + 2 * std::uniform_int_distribution<int>(0, 7)(rng);  // 1..15
    ExprTree t = testutil::random_tree(vocab, size, rng);
    REQUIRE(parse_prefix(to_prefix(t)) == t);

    int ops = 0;
    for (const Token& tok : t.tokens) ops += tok.is_operator();
    REQUIRE(t.size() == 2 * ops + 1);  // size law
  }
}

TEST_CASE("both example solutions execute to 275", "[expr]") {
  std::vector<double> qvals{100.0, 2.0, 3.5};

  EvalResult a = evaluate(parse_prefix_string("* / n0 n1 + n1 n2"), qvals);
  REQUIRE(a.ok());
  REQUIRE(a.value == Catch::Approx(275.0).margin(1e-9));

  EvalResult b = evaluate(parse_prefix_string("+ n0 * / n0 n1 n2"), qvals);
  REQUIRE(b.ok());
  REQUIRE(b.value == Catch::Approx(275.0).margin(1e-9));
}

TEST_CASE("evaluation error cases", "[expr]") {
  std::vector<double> qvals{100.0, 2.0};
  EvalResult div = evaluate(parse_prefix_string("/ n0 - n1 n1"), qvals);
  REQUIRE_FALSE(div.ok());
  REQUIRE(div.error == EvalError::DivisionByZero);

  // negative base with fractional exponent
  std::vector<double> q2{1.0, 3.0, 0.5};
  EvalResult dom = evaluate(parse_prefix_string("^ - n0 n1 n2"), q2);
  REQUIRE_FALSE(dom.ok());
  REQUIRE(dom.error == EvalError::DomainError);

  EvalResult bad = evaluate(parse_prefix_string("n3"), qvals);
  REQUIRE(bad.error == EvalError::BadQuantityIndex);
}

TEST_CASE("evaluation agrees with an independent recursive evaluator", "[expr]") {
  std::mt19937_64 rng(97);
  int checked = 0;
  for (int iter = 0; iter < 10000; ++iter) {
    int n_q = 1 + std::uniform_int_distribution<int>(0, 2)(rng);
    Vocab vocab = Vocab::standard(n_q);
    std::vector<double> qvals(n_q);
    for (double& v : qvals)
      v = std::uniform_real_distribution<double>(0.5, 50.0)(rng);
    int size = 1 + 2 * std::uniform_int_distribution<int>(0, 4)(rng);  // 1..9
    ExprTree t = testutil::random_tree(vocab, size, rng);

    auto expected = testutil::oracle_eval(t.tokens, qvals);
    EvalResult got = evaluate(t, qvals);
    if (expected) {
      REQUIRE(got.ok());
      REQUIRE(got.value == Catch::Approx(*expected).epsilon(1e-12));
      ++checked;
    } else {
      REQUIRE_FALSE(got.ok());
    }
  }
  REQUIRE(checked > 5000);  // most random trees evaluate cleanly
}

TEST_CASE("annotated node values are consistent with their children", "[expr]") {
  std::mt19937_64 rng(7);
  Vocab vocab = Vocab::standard(3);
  for (int iter = 0; iter < 300; ++iter) {
    std::vector<double> qvals{3.0, 5.0, 7.5};
    ExprTree t = testutil::random_tree(vocab, 7, rng);
    std::vector<double> values;
    EvalResult r = evaluate(t, qvals, &values);
    if (!r.ok()) continue;
    REQUIRE(values[0] == r.value);
    for (int i = 0; i < t.size(); ++i) {
      if (t.is_leaf(i)) continue;
      EvalResult node = apply_op(t.tokens[i].op, values[t.left[i]], values[t.right[i]]);
      REQUIRE(node.ok());
      REQUIRE(std::fabs(node.value - values[i]) <=
              1e-9 * std::max(1.0, std::fabs(values[i])));
    }
  }
}

TEST_CASE("answers_match tolerance", "[expr]") {
  REQUIRE(answers_match(275.0, 275.0));
  REQUIRE(answers_match(275.00001, 275.0));
  REQUIRE_FALSE(answers_match(75.0, 275.0));
  REQUIRE_FALSE(answers_match(std::nan(""), 275.0));
  REQUIRE(answers_match(0.00005, 0.0));  // absolute floor near zero
}

TEST_CASE("token text round trip", "[expr]") {
  for (const char* s : {"+", "-", "*", "/", "^", "1", "2", "pi", "n0", "n12"})
    REQUIRE(token_to_string(token_from_string(s)) == s);
  REQUIRE_THROWS_AS(token_from_string("q0"), ParseError);
}
