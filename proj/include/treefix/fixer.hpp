#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <optional>
#include <queue>
#include <random>
#include <span>
#include <vector>

#include "treefix/expr.hpp"

namespace treefix {

// Tree plus per-node values and per-node token distributions (over the
// vocabulary) — everything the fix search needs.
struct AnnotatedTree {
  ExprTree tree;
  std::vector<double> values;
  std::vector<std::vector<double>> dists;

  double prob(int pos, int vocab_idx) const { return dists[pos][vocab_idx]; }
};

inline std::vector<std::vector<double>> uniform_dists(int tree_size, int vocab_size) {
  return std::vector<std::vector<double>>(
      tree_size, std::vector<double>(vocab_size, 1.0 / vocab_size));
}

// nullopt when the tree does not evaluate (division by zero, domain error).
inline std::optional<AnnotatedTree> annotate_values(const ExprTree& tree,
                                                    std::span<const double> qvals,
                                                    std::vector<std::vector<double>> dists) {
  AnnotatedTree at;
  at.tree = tree;
  at.dists = std::move(dists);
  if (!evaluate(tree, qvals, &at.values)) return std::nullopt;
  return at;
}

enum class Slot { Left, Right, Operator };

// Expected value of one child given the parent's expected value: solves
// x (+|-|*|/|^) right = alpha  or  left (+|-|*|/|^) x = alpha.
// nullopt when the inversion is undefined over the reals.
inline std::optional<double> solve_child_value(Op parent_op, double left, double right,
                                               double alpha_parent, Slot slot) {
  const double a = alpha_parent;
  double x = 0.0;
  if (slot == Slot::Left) {
    const double r = right;
    switch (parent_op) {
      case Op::Add: x = a - r; break;
      case Op::Sub: x = a + r; break;
      case Op::Mul:
        if (std::fabs(r) < 1e-12) return std::nullopt;
        x = a / r;
        break;
      case Op::Div:
        if (std::fabs(r) < 1e-12) return std::nullopt;
        x = a * r;
        break;
      case Op::Pow: {
        if (std::fabs(r) < 1e-12) return std::nullopt;
        if (a > 0.0) {
          x = std::pow(a, 1.0 / r);
        } else if (a == 0.0) {
          if (r <= 0.0) return std::nullopt;
          x = 0.0;
        } else {
          // negative target: real root only for odd integer exponents
          double ri = std::round(r);
          if (std::fabs(r - ri) > 1e-9 || std::fmod(std::fabs(ri), 2.0) != 1.0)
            return std::nullopt;
          x = -std::pow(-a, 1.0 / r);
        }
        break;
      }
    }
  } else {
    const double l = left;
    switch (parent_op) {
      case Op::Add: x = a - l; break;
      case Op::Sub: x = l - a; break;
      case Op::Mul:
        if (std::fabs(l) < 1e-12) return std::nullopt;
        x = a / l;
        break;
      case Op::Div:
        if (std::fabs(a) < 1e-12) return std::nullopt;
        x = l / a;
        break;
      case Op::Pow:
        if (l <= 0.0 || std::fabs(l - 1.0) < 1e-12 || a <= 0.0) return std::nullopt;
        x = std::log(a) / std::log(l);
        break;
    }
  }
  if (!std::isfinite(x)) return std::nullopt;
  return x;
}

// Replacement operator: the first other operator (fixed order +,-,*,/,^)
// whose application to the child values matches alpha.
inline std::optional<Op> solve_child_operator(Op current, double left, double right,
                                              double alpha_parent) {
  for (Op op : kAllOps) {
    if (op == current) continue;
    EvalResult r = apply_op(op, left, right);
    if (r.ok() && answers_match(r.value, alpha_parent)) return op;
  }
  return std::nullopt;
}

// Matching tolerance when mapping an expected value onto vocabulary tokens.
inline bool value_matches_token(double token_value, double alpha) {
  return std::fabs(token_value - alpha) <= 1e-6 * std::max(1.0, std::fabs(alpha));
}

struct FixResult {
  ExprTree tree;
  int edit_distance = 0;
  int steps_used = 0;
};

// Best-first search for a one-token substitution that makes the tree
// execute to y. Expected values propagate from the root toward the leaves
// via solve_child_value; terminal candidates are admitted only when the
// expected value maps onto an available token.
inline std::optional<FixResult> one_fix(const AnnotatedTree& at, const Vocab& vocab,
                                        std::span<const double> qvals, double y,
                                        int max_pops = 10000) {
  const ExprTree& tree = at.tree;
  assert(static_cast<int>(at.values.size()) == tree.size());
  assert(static_cast<int>(at.dists.size()) == tree.size());

  struct Item {
    int pos;
    double alpha;
    std::optional<Op> op_subst;
    double priority;
    long seq;
  };
  auto worse = [](const Item& a, const Item& b) {
    if (a.priority != b.priority) return a.priority < b.priority;
    return a.seq > b.seq;
  };
  std::priority_queue<Item, std::vector<Item>, decltype(worse)> queue(worse);
  long seq = 0;

  auto current_index = [&](int pos) {
    auto idx = vocab.index_of(tree.tokens[pos]);
    assert(idx);
    return *idx;
  };

  // candidate vocab indices whose value matches alpha, best probability first
  auto leaf_candidates = [&](int pos, double alpha) {
    std::vector<int> out;
    for (int i = 0; i < vocab.size(); ++i) {
      const Token& t = vocab.tokens[i];
      if (t.is_operator() || t == tree.tokens[pos]) continue;
      if (value_matches_token(token_value(t, qvals), alpha)) out.push_back(i);
    }
    std::sort(out.begin(), out.end(), [&](int a, int b) {
      if (at.prob(pos, a) != at.prob(pos, b)) return at.prob(pos, a) > at.prob(pos, b);
      return a < b;
    });
    return out;
  };

  auto verify = [&](const ExprTree& candidate) {
    EvalResult r = evaluate(candidate, qvals);
    return r.ok() && answers_match(r.value, y);
  };

  auto push_child = [&](int cpos, double alpha) {
    if (tree.is_leaf(cpos)) {
      std::vector<int> cands = leaf_candidates(cpos, alpha);
      if (cands.empty()) return;  // expected value maps to no token
      queue.push({cpos, alpha, std::nullopt, at.prob(cpos, cands[0]), seq++});
    } else {
      double p = 1.0 - at.prob(cpos, current_index(cpos));
      queue.push({cpos, alpha, std::nullopt, p, seq++});
    }
  };

  queue.push({0, y, std::nullopt, 1.0, seq++});

  for (int pops = 0; pops < max_pops && !queue.empty(); ++pops) {
    Item it = queue.top();
    queue.pop();

    if (it.op_subst) {
      ExprTree candidate = tree;
      candidate.tokens[it.pos] = Token::make_op(*it.op_subst);
      if (verify(candidate)) return FixResult{candidate, 1, 0};
      continue;
    }
    if (tree.is_leaf(it.pos)) {
      for (int idx : leaf_candidates(it.pos, it.alpha)) {
        ExprTree candidate = tree;
        candidate.tokens[it.pos] = vocab.tokens[idx];
        if (verify(candidate)) return FixResult{candidate, 1, 0};
      }
      continue;
    }

    // internal node: propagate the expected value into each child slot
    const int lpos = tree.left[it.pos];
    const int rpos = tree.right[it.pos];
    const Op op = tree.tokens[it.pos].op;
    const double lval = at.values[lpos];
    const double rval = at.values[rpos];

    if (auto av = solve_child_value(op, lval, rval, it.alpha, Slot::Left)) push_child(lpos, *av);
    if (auto av = solve_child_value(op, lval, rval, it.alpha, Slot::Right)) push_child(rpos, *av);
    if (auto po = solve_child_operator(op, lval, rval, it.alpha)) {
      auto op_idx = vocab.index_of_op(*po);
      if (op_idx) queue.push({it.pos, 0.0, po, at.prob(it.pos, *op_idx), seq++});
    }
  }
  return std::nullopt;
}

// Replaces one uniformly chosen token position with a category-mate
// resampled from the position's distribution (current symbol excluded).
inline ExprTree random_walk(const ExprTree& tree, const std::vector<std::vector<double>>& dists,
                            const Vocab& vocab, std::mt19937_64& rng) {
  const int n = tree.size();
  std::uniform_int_distribution<int> pos_dist(0, n - 1);

  for (int attempts = 0; attempts < n; ++attempts) {
    int pos = pos_dist(rng);
    const bool want_op = tree.tokens[pos].is_operator();
    auto cur = vocab.index_of(tree.tokens[pos]);
    assert(cur);

    std::vector<int> cands;
    double total = 0.0;
    for (int i = 0; i < vocab.size(); ++i) {
      if (vocab.is_operator(i) != want_op || i == *cur) continue;
      cands.push_back(i);
      total += dists[pos][i];
    }
    if (cands.empty()) continue;  // single-symbol category: redraw

    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    int chosen = cands.back();
    if (total > 1e-300) {
      double cum = 0.0;
      for (int i : cands) {
        cum += dists[pos][i] / total;
        if (u < cum) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = cands[std::min<size_t>(cands.size() - 1, static_cast<size_t>(u * cands.size()))];
    }
    ExprTree out = tree;
    out.tokens[pos] = vocab.tokens[chosen];
    return out;
  }
  return tree;
}

inline int token_diff(const ExprTree& a, const ExprTree& b) {
  assert(a.size() == b.size());
  int d = 0;
  for (int i = 0; i < a.size(); ++i) d += a.tokens[i] != b.tokens[i];
  return d;
}

// Produces per-position token distributions for a candidate tree; the
// training loop plugs in the policy here, tests may use uniform_dists.
using TreeAnnotator = std::function<std::vector<std::vector<double>>(const ExprTree&)>;

// Repeated one-token repair: try the direct fix, otherwise perturb one
// token and retry, up to m perturbations. Deterministic given the rng seed.
inline std::optional<FixResult> m_fix(const ExprTree& tree, const Vocab& vocab,
                                      std::span<const double> qvals, double y, int m,
                                      const TreeAnnotator& annotator, std::mt19937_64& rng,
                                      int max_pops = 10000) {
  assert(m >= 1);
  if (EvalResult r = evaluate(tree, qvals); r.ok() && answers_match(r.value, y))
    return FixResult{tree, 0, 0};

  ExprTree current = tree;
  for (int i = 0; i <= m; ++i) {
    std::vector<std::vector<double>> dists = annotator(current);
    if (auto at = annotate_values(current, qvals, dists)) {
      if (auto fix = one_fix(*at, vocab, qvals, y, max_pops))
        return FixResult{fix->tree, token_diff(tree, fix->tree), i};
      dists = std::move(at->dists);
    }
    if (i == m) break;
    current = random_walk(current, dists, vocab, rng);
  }
  return std::nullopt;
}

}  // namespace treefix
