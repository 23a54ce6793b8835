#pragma once

#include <stdexcept>
#include <utility>
#include <vector>

#include "treefix/expr.hpp"

namespace treefix {

// Linear size prior: a tree for a problem with n quantities is searched in
// [a_min*n + b_min, a_max*n + b_max], clamped to odd values >= 1.
struct SizePrior {
  int a_min = 2;
  int b_min = -1;
  int a_max = 2;
  int b_max = 3;
};

inline std::pair<int, int> size_bounds(int n_quantities, const SizePrior& prior = SizePrior{}) {
  int lo = prior.a_min * n_quantities + prior.b_min;
  int hi = prior.a_max * n_quantities + prior.b_max;
  if (lo < 1) lo = 1;
  if (lo % 2 == 0) ++lo;  // valid tree sizes are odd; round the bound inward
  if (hi % 2 == 0) --hi;
  if (hi < lo) hi = lo;
  return {lo, hi};
}

// Running state of a fixed-size prefix decode.
struct DecodeState {
  int target_size = 1;
  int n_operators = 0;
  int n_numerics = 0;

  int emitted() const { return n_operators + n_numerics; }
  bool complete() const { return n_numerics == n_operators + 1; }

  void push(const Token& t) {
    if (t.is_operator())
      ++n_operators;
    else
      ++n_numerics;
  }
};

// Per-step vocabulary mask. Two rules keep every decode a well-formed
// prefix expression that completes at exactly target_size tokens:
//   1. operators stop once their count reaches floor(l/2);
//   2. before the final position, numerics may never outnumber operators.
inline std::vector<char> valid_token_mask(const DecodeState& state, const Vocab& vocab) {
  const int l = state.target_size;
  const int pos = state.emitted();  // 0-based position about to be filled
  if (pos >= l) throw std::logic_error("decode past target size");

  const bool op_ok = state.n_operators + 1 <= l / 2;
  const bool last = (pos + 1 == l);
  const bool num_ok = last || state.n_numerics + 1 <= state.n_operators;

  std::vector<char> mask(vocab.size(), 0);
  bool any = false;
  for (int i = 0; i < vocab.size(); ++i) {
    bool ok = vocab.is_operator(i) ? op_ok : num_ok;
    mask[i] = ok ? 1 : 0;
    any = any || ok;
  }
  if (!any) throw std::logic_error("no legal token for decode state");
  return mask;
}

class SizeTooLarge : public std::runtime_error {
 public:
  explicit SizeTooLarge(int size)
      : std::runtime_error("enumeration capped at size 11, got " + std::to_string(size)) {}
};

// Exhaustively lists every mask-reachable expression with size in
// [min_size, max_size]. Deterministic order: sizes ascending, tokens by
// vocabulary index.
inline std::vector<ExprTree> enumerate_trees(const Vocab& vocab, int min_size, int max_size) {
  if (max_size > 11) throw SizeTooLarge(max_size);
  std::vector<ExprTree> out;
  std::vector<Token> seq;

  for (int l = std::max(1, min_size); l <= max_size; ++l) {
    if (l % 2 == 0) continue;
    seq.clear();

    struct Rec {
      const Vocab& vocab;
      std::vector<Token>& seq;
      std::vector<ExprTree>& out;
      int l;
      void go(DecodeState st) {
        if (st.emitted() == l) {
          out.push_back(parse_prefix(seq));
          return;
        }
        std::vector<char> mask = valid_token_mask(st, vocab);
        for (int i = 0; i < vocab.size(); ++i) {
          if (!mask[i]) continue;
          seq.push_back(vocab.tokens[i]);
          DecodeState next = st;
          next.push(vocab.tokens[i]);
          go(next);
          seq.pop_back();
        }
      }
    } rec{vocab, seq, out, l};

    DecodeState st;
    st.target_size = l;
    rec.go(st);
  }
  return out;
}

inline std::vector<ExprTree> enumerate_trees(const Vocab& vocab, int size) {
  return enumerate_trees(vocab, size, size);
}

}  // namespace treefix
