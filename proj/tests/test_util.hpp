#pragma once

#include <optional>
#include <random>
#include <vector>

#include "treefix/expr.hpp"
#include "treefix/tree_reg.hpp"

namespace testutil {

using namespace treefix;

// Uniformly random mask-respecting decode of exactly `size` tokens.
inline ExprTree random_tree(const Vocab& vocab, int size, std::mt19937_64& rng) {
  std::vector<Token> seq;
  DecodeState st;
  st.target_size = size;
  while (st.emitted() < size) {
    std::vector<char> mask = valid_token_mask(st, vocab);
    std::vector<int> options;
    for (int i = 0; i < vocab.size(); ++i)
      if (mask[i]) options.push_back(i);
    int pick = options[std::uniform_int_distribution<size_t>(0, options.size() - 1)(rng)];
    seq.push_back(vocab.tokens[pick]);
    st.push(vocab.tokens[pick]);
  }
  return parse_prefix(seq);
}

// Test-side oracle: evaluates a prefix token sequence by direct recursion,
// independent of ExprTree's parser and evaluator.
inline std::optional<double> recursive_prefix_eval(const std::vector<Token>& tokens,
                                                   const std::vector<double>& qvals,
                                                   size_t& pos) {
  if (pos >= tokens.size()) return std::nullopt;
  Token t = tokens[pos++];
  if (!t.is_operator()) {
    if (t.kind == Token::Kind::Quantity) {
      if (t.quant < 0 || t.quant >= static_cast<int>(qvals.size())) return std::nullopt;
      return qvals[t.quant];
    }
    return t.con;
  }
  auto l = recursive_prefix_eval(tokens, qvals, pos);
  if (!l) return std::nullopt;
  auto r = recursive_prefix_eval(tokens, qvals, pos);
  if (!r) return std::nullopt;
  EvalResult res = apply_op(t.op, *l, *r);
  if (!res.ok()) return std::nullopt;
  return res.value;
}

inline std::optional<double> oracle_eval(const std::vector<Token>& tokens,
                                         const std::vector<double>& qvals) {
  size_t pos = 0;
  auto v = recursive_prefix_eval(tokens, qvals, pos);
  if (pos != tokens.size()) return std::nullopt;
  return v;
}

// Brute-force single-substitution oracle: all one-token variants of `tree`
// (different token, same position) that execute to y.
inline std::vector<ExprTree> single_substitution_fixes(const ExprTree& tree, const Vocab& vocab,
                                                       const std::vector<double>& qvals,
                                                       double y) {
  std::vector<ExprTree> fixes;
  for (int pos = 0; pos < tree.size(); ++pos) {
    for (int i = 0; i < vocab.size(); ++i) {
      if (vocab.tokens[i] == tree.tokens[pos]) continue;
      if (vocab.is_operator(i) != tree.tokens[pos].is_operator()) continue;  // keep the shape
      ExprTree cand = tree;
      cand.tokens[pos] = vocab.tokens[i];
      EvalResult r = evaluate(cand, qvals);
      if (r.ok() && answers_match(r.value, y)) fixes.push_back(std::move(cand));
    }
  }
  return fixes;
}

}  // namespace testutil
