#pragma once

#include <algorithm>
#include <cassert>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "treefix/expr.hpp"
#include "treefix/tape.hpp"
#include "treefix/tree_reg.hpp"

namespace treefix {

struct GruCell {
  Tensor Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh;

  void resize(int d) {
    Wz.resize(d, d);
    Uz.resize(d, d);
    bz.resize(1, d);
    Wr.resize(d, d);
    Ur.resize(d, d);
    br.resize(1, d);
    Wh.resize(d, d);
    Uh.resize(d, d);
    bh.resize(1, d);
  }

  // Update/reset-gated recurrence: h' = (1-z)*h + z*tanh(Wh x + Uh(r*h) + bh).
  Tape::Ref step(Tape& tp, Tape::Ref x, Tape::Ref h) const {
    auto& self = const_cast<GruCell&>(*this);
    Tape::Ref z = tp.sigmoid_(tp.add(tp.add(tp.matvec(self.Wz, x), tp.matvec(self.Uz, h)), tp.row(self.bz, 0)));
    Tape::Ref r = tp.sigmoid_(tp.add(tp.add(tp.matvec(self.Wr, x), tp.matvec(self.Ur, h)), tp.row(self.br, 0)));
    Tape::Ref hh = tp.tanh_(
        tp.add(tp.add(tp.matvec(self.Wh, x), tp.matvec(self.Uh, tp.mul(r, h))), tp.row(self.bh, 0)));
    return tp.add(tp.mul(tp.one_minus(z), h), tp.mul(z, hh));
  }
};

inline constexpr const char* kNumWord = "<num>";
inline constexpr const char* kOovWord = "<oov>";

// All trainable state of the tree-structured scorer, plus the word
// vocabulary the encoder was built for.
struct PolicyParams {
  int d = 64;
  std::vector<std::string> word_list;
  std::unordered_map<std::string, int> word_ids;

  Tensor word_emb;     // (n_words, d)
  GruCell fwd, bwd;
  Tensor att_w;        // (d, 2d)
  Tensor att_v;        // (d, 1)
  Tensor score_w;      // (d, 3d)
  Tensor score_v;      // (d, 1)
  Tensor op_emb;       // (5, d)
  Tensor con_emb;      // (3, d)   rows: 1, 2, pi
  Tensor left_tf;      // (d, 3d)
  Tensor right_tf;     // (d, 4d)
  Tensor subtree_tf;   // (d, 3d)

  template <class F>
  void visit(F&& f) {
    f("word_emb", word_emb);
    auto cell = [&](const std::string& p, GruCell& g) {
      f(p + ".Wz", g.Wz);
      f(p + ".Uz", g.Uz);
      f(p + ".bz", g.bz);
      f(p + ".Wr", g.Wr);
      f(p + ".Ur", g.Ur);
      f(p + ".br", g.br);
      f(p + ".Wh", g.Wh);
      f(p + ".Uh", g.Uh);
      f(p + ".bh", g.bh);
    };
    cell("fwd", fwd);
    cell("bwd", bwd);
    f("att_w", att_w);
    f("att_v", att_v);
    f("score_w", score_w);
    f("score_v", score_v);
    f("op_emb", op_emb);
    f("con_emb", con_emb);
    f("left_tf", left_tf);
    f("right_tf", right_tf);
    f("subtree_tf", subtree_tf);
  }

  static PolicyParams init(int d, const std::vector<std::string>& words, uint64_t seed) {
    PolicyParams p;
    p.d = d;
    p.word_list.push_back(kNumWord);
    p.word_list.push_back(kOovWord);
    for (const auto& w : words)
      if (w != kNumWord && w != kOovWord) p.word_list.push_back(w);
    for (size_t i = 0; i < p.word_list.size(); ++i) p.word_ids[p.word_list[i]] = static_cast<int>(i);

    p.word_emb.resize(static_cast<int>(p.word_list.size()), d);
    p.fwd.resize(d);
    p.bwd.resize(d);
    p.att_w.resize(d, 2 * d);
    p.att_v.resize(d, 1);
    p.score_w.resize(d, 3 * d);
    p.score_v.resize(d, 1);
    p.op_emb.resize(5, d);
    p.con_emb.resize(3, d);
    p.left_tf.resize(d, 3 * d);
    p.right_tf.resize(d, 4 * d);
    p.subtree_tf.resize(d, 3 * d);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.08, 0.08);
    p.visit([&](const std::string&, Tensor& t) {
      for (auto& x : t.v) x = u(rng);
    });
    return p;
  }

  int word_id(const std::string& w) const {
    auto it = word_ids.find(w);
    return it == word_ids.end() ? 1 /* <oov> */ : it->second;
  }

  void zero_grads() {
    visit([](const std::string&, Tensor& t) { t.zero_grad(); });
  }
};

// Distinct words of a corpus slice, in first-appearance order; quantity
// positions are excluded (they encode as <num>).
inline std::vector<std::string> collect_words(const std::vector<Problem>& problems) {
  std::vector<std::string> words;
  std::unordered_map<std::string, int> seen;
  for (const auto& p : problems) {
    std::vector<char> is_q(p.words.size(), 0);
    for (const auto& q : p.quantities)
      if (q.position >= 0 && q.position < static_cast<int>(p.words.size())) is_q[q.position] = 1;
    for (size_t i = 0; i < p.words.size(); ++i) {
      if (is_q[i]) continue;
      if (seen.emplace(p.words[i], 1).second) words.push_back(p.words[i]);
    }
  }
  return words;
}

struct Encoded {
  std::vector<Tape::Ref> h;  // contextual word states
  Tape::Ref q0;              // root goal
};

inline Encoded encode(Tape& tp, const Problem& prob, PolicyParams& params) {
  const int n = static_cast<int>(prob.words.size());
  if (n == 0) throw std::invalid_argument("problem has no words");

  std::vector<char> is_q(n, 0);
  for (const auto& q : prob.quantities) {
    if (q.position < 0 || q.position >= n)
      throw std::out_of_range("quantity position outside text");
    is_q[q.position] = 1;
  }
  std::vector<Tape::Ref> emb(n);
  for (int i = 0; i < n; ++i) {
    int wid = is_q[i] ? 0 : params.word_id(prob.words[i]);
    emb[i] = tp.row(params.word_emb, wid);
  }

  std::vector<Tape::Ref> f(n), b(n);
  Tape::Ref h = tp.zeros(params.d);
  for (int i = 0; i < n; ++i) {
    h = params.fwd.step(tp, emb[i], h);
    f[i] = h;
  }
  h = tp.zeros(params.d);
  for (int i = n - 1; i >= 0; --i) {
    h = params.bwd.step(tp, emb[i], h);
    b[i] = h;
  }

  Encoded enc;
  enc.h.resize(n);
  for (int i = 0; i < n; ++i) enc.h[i] = tp.add(f[i], b[i]);
  enc.q0 = tp.add(f[n - 1], b[0]);
  return enc;
}

// Attention-pooled context for a goal vector.
inline Tape::Ref attend(Tape& tp, Tape::Ref q, const std::vector<Tape::Ref>& h,
                        PolicyParams& params) {
  std::vector<Tape::Ref> scores(h.size());
  for (size_t i = 0; i < h.size(); ++i)
    scores[i] = tp.dot(params.att_v, tp.tanh_(tp.matvec(params.att_w, tp.concat({q, h[i]}))));
  Tape::Ref a = tp.softmax_(tp.stack(scores));
  return tp.weighted_sum(a, h);
}

inline int constant_row(double value) {
  if (value == 1.0) return 0;
  if (value == 2.0) return 1;
  if (value == kPi) return 2;
  throw std::invalid_argument("unsupported constant");
}

inline Tape::Ref token_embedding(Tape& tp, const Token& t, const Encoded& enc,
                                 const Problem& prob, PolicyParams& params) {
  switch (t.kind) {
    case Token::Kind::Operator: return tp.row(params.op_emb, static_cast<int>(t.op));
    case Token::Kind::Constant: return tp.row(params.con_emb, constant_row(t.con));
    case Token::Kind::Quantity: return enc.h[prob.quantities[t.quant].position];
  }
  throw std::logic_error("bad token kind");
}

// Raw scores s(t|q,c) over the vocabulary.
inline Tape::Ref token_scores(Tape& tp, Tape::Ref q, Tape::Ref c, const Vocab& vocab,
                              const Encoded& enc, const Problem& prob, PolicyParams& params) {
  std::vector<Tape::Ref> s(vocab.size());
  for (int i = 0; i < vocab.size(); ++i) {
    Tape::Ref e = token_embedding(tp, vocab.tokens[i], enc, prob, params);
    s[i] = tp.dot(params.score_v, tp.tanh_(tp.matvec(params.score_w, tp.concat({q, c, e}))));
  }
  return tp.stack(s);
}

inline Tape::Ref goal_left(Tape& tp, Tape::Ref q, Tape::Ref c, Tape::Ref e_op,
                           PolicyParams& params) {
  return tp.tanh_(tp.matvec(params.left_tf, tp.concat({q, c, e_op})));
}

inline Tape::Ref goal_right(Tape& tp, Tape::Ref q, Tape::Ref c, Tape::Ref e_op, Tape::Ref g_left,
                            PolicyParams& params) {
  return tp.tanh_(tp.matvec(params.right_tf, tp.concat({q, c, e_op, g_left})));
}

inline Tape::Ref subtree_summary(Tape& tp, Tape::Ref e_op, Tape::Ref g_left, Tape::Ref g_right,
                                 PolicyParams& params) {
  return tp.tanh_(tp.matvec(params.subtree_tf, tp.concat({e_op, g_left, g_right})));
}

// One generated sequence with its per-step distributions.
struct DecodeTrace {
  std::vector<int> token_ids;              // vocabulary indices, preorder
  std::vector<Token> tokens;
  std::vector<std::vector<double>> dists;  // per step, prob over vocab (masked -> 0)
  double log_prob = 0.0;

  ExprTree tree() const { return parse_prefix(tokens); }
};

namespace detail {

// Preorder generation shared by greedy/sampled/forced modes. The chooser
// sees the masked log-probabilities and returns the vocabulary index to
// emit. Per-step log-prob picks are appended to `step_picks` for losses.
template <class Chooser>
DecodeTrace generate_preorder(Tape& tp, const Problem& prob, const Vocab& vocab,
                              PolicyParams& params, const Encoded& enc, int target_size,
                              Chooser&& choose, bool record_dists,
                              std::vector<Tape::Ref>* step_picks = nullptr) {
  DecodeTrace trace;
  DecodeState st;
  st.target_size = target_size;

  struct Rec {
    Tape& tp;
    const Problem& prob;
    const Vocab& vocab;
    PolicyParams& params;
    const Encoded& enc;
    DecodeState& st;
    DecodeTrace& trace;
    Chooser& choose;
    bool record_dists;
    std::vector<Tape::Ref>* step_picks;

    Tape::Ref gen(Tape::Ref q) {
      Tape::Ref c = attend(tp, q, enc.h, params);
      std::vector<char> mask = valid_token_mask(st, vocab);
      Tape::Ref scores = token_scores(tp, q, c, vocab, enc, prob, params);
      Tape::Ref lp = tp.masked_log_softmax(scores, mask);

      int step = st.emitted();
      int pick = choose(step, tp.val(lp), mask);
      assert(pick >= 0 && pick < vocab.size() && mask[pick]);

      const Token tok = vocab.tokens[pick];
      trace.token_ids.push_back(pick);
      trace.tokens.push_back(tok);
      trace.log_prob += tp.val(lp)[pick];
      if (record_dists) {
        std::vector<double> dist(vocab.size(), 0.0);
        for (int i = 0; i < vocab.size(); ++i)
          if (mask[i]) dist[i] = std::exp(tp.val(lp)[i]);
        trace.dists.push_back(std::move(dist));
      }
      if (step_picks) step_picks->push_back(tp.pick(lp, pick));
      st.push(tok);

      if (!tok.is_operator()) return token_embedding(tp, tok, enc, prob, params);

      Tape::Ref e_op = tp.row(params.op_emb, static_cast<int>(tok.op));
      Tape::Ref ql = goal_left(tp, q, c, e_op, params);
      Tape::Ref gl = gen(ql);
      Tape::Ref qr = goal_right(tp, q, c, e_op, gl, params);
      Tape::Ref gr = gen(qr);
      return subtree_summary(tp, e_op, gl, gr, params);
    }
  } rec{tp, prob, vocab, params, enc, st, trace, choose, record_dists, step_picks};

  rec.gen(enc.q0);
  assert(st.emitted() == target_size && st.complete());
  return trace;
}

inline int argmax_unmasked(const std::vector<double>& lp, const std::vector<char>& mask) {
  int best = -1;
  for (size_t i = 0; i < lp.size(); ++i) {
    if (!mask[i]) continue;
    if (best < 0 || lp[i] > lp[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace detail

inline DecodeTrace decode_greedy(Tape& tp, const Problem& prob, const Vocab& vocab,
                                 PolicyParams& params, int target_size) {
  Encoded enc = encode(tp, prob, params);
  return detail::generate_preorder(
      tp, prob, vocab, params, enc, target_size,
      [](int, const std::vector<double>& lp, const std::vector<char>& mask) {
        return detail::argmax_unmasked(lp, mask);
      },
      /*record_dists=*/true);
}

inline DecodeTrace decode_sample(Tape& tp, const Problem& prob, const Vocab& vocab,
                                 PolicyParams& params, int target_size, std::mt19937_64& rng) {
  Encoded enc = encode(tp, prob, params);
  return detail::generate_preorder(
      tp, prob, vocab, params, enc, target_size,
      [&rng](int, const std::vector<double>& lp, const std::vector<char>& mask) {
        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        double cum = 0.0;
        int last = -1;
        for (size_t i = 0; i < lp.size(); ++i) {
          if (!mask[i]) continue;
          last = static_cast<int>(i);
          cum += std::exp(lp[i]);
          if (u < cum) return last;
        }
        return last;  // numeric slack lands on the final unmasked token
      },
      /*record_dists=*/true);
}

// Teacher-forced pass over an existing tree; returns the per-step
// distributions (the tree's probability annotation).
inline DecodeTrace forced_trace(Tape& tp, const Problem& prob, const Vocab& vocab,
                                PolicyParams& params, const Encoded& enc, const ExprTree& tree,
                                std::vector<Tape::Ref>* step_picks = nullptr) {
  std::vector<int> gold(tree.size());
  for (int i = 0; i < tree.size(); ++i) {
    auto idx = vocab.index_of(tree.tokens[i]);
    if (!idx) throw std::invalid_argument("tree token outside vocabulary");
    gold[i] = *idx;
  }
  return detail::generate_preorder(
      tp, prob, vocab, params, enc, tree.size(),
      [&gold](int step, const std::vector<double>&, const std::vector<char>& mask) {
        if (!mask[gold[step]]) throw std::logic_error("gold token masked during forced trace");
        return gold[step];
      },
      /*record_dists=*/true, step_picks);
}

inline std::vector<std::vector<double>> annotate_dists(Tape& tp, const Problem& prob,
                                                       const Vocab& vocab, PolicyParams& params,
                                                       const ExprTree& tree) {
  tp.reset();
  Encoded enc = encode(tp, prob, params);
  return forced_trace(tp, prob, vocab, params, enc, tree).dists;
}

// ---- Beam search ---------------------------------------------------------

inline std::vector<DecodeTrace> decode_beam(Tape& tp, const Problem& prob, const Vocab& vocab,
                                            PolicyParams& params, int target_size, int width) {
  Encoded enc = encode(tp, prob, params);

  struct Frame {
    bool awaiting_left = true;
    Tape::Ref q, c, e_op, g_left;
  };
  struct Hyp {
    double logp = 0.0;
    std::vector<int> token_ids;
    DecodeState st;
    std::vector<Frame> stack;
    Tape::Ref goal;
  };

  Hyp root;
  root.st.target_size = target_size;
  root.goal = enc.q0;
  std::vector<Hyp> live{std::move(root)};

  for (int step = 0; step < target_size; ++step) {
    struct Cand {
      int hyp;
      int token;
      double logp;
    };
    std::vector<Cand> cands;
    std::vector<Tape::Ref> ctxs(live.size());
    std::vector<std::vector<double>> lps(live.size());

    for (size_t hi = 0; hi < live.size(); ++hi) {
      Hyp& h = live[hi];
      ctxs[hi] = attend(tp, h.goal, enc.h, params);
      std::vector<char> mask = valid_token_mask(h.st, vocab);
      Tape::Ref scores = token_scores(tp, h.goal, ctxs[hi], vocab, enc, prob, params);
      Tape::Ref lp = tp.masked_log_softmax(scores, mask);
      lps[hi] = tp.val(lp);
      for (int t = 0; t < vocab.size(); ++t)
        if (mask[t]) cands.push_back({static_cast<int>(hi), t, h.logp + lps[hi][t]});
    }

    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      const auto& ta = live[a.hyp].token_ids;
      const auto& tb = live[b.hyp].token_ids;
      if (ta != tb) return std::lexicographical_compare(ta.begin(), ta.end(), tb.begin(), tb.end());
      return a.token < b.token;
    });
    if (static_cast<int>(cands.size()) > width) cands.resize(width);

    std::vector<Hyp> next;
    next.reserve(cands.size());
    for (const Cand& cd : cands) {
      Hyp h = live[cd.hyp];  // copy parent state
      Tape::Ref q = h.goal;
      Tape::Ref c = ctxs[cd.hyp];
      const Token tok = vocab.tokens[cd.token];
      h.logp = cd.logp;
      h.token_ids.push_back(cd.token);
      h.st.push(tok);

      if (tok.is_operator()) {
        Tape::Ref e_op = tp.row(params.op_emb, static_cast<int>(tok.op));
        h.stack.push_back({true, q, c, e_op, {}});
        h.goal = goal_left(tp, q, c, e_op, params);
      } else {
        Tape::Ref g = token_embedding(tp, tok, enc, prob, params);
        while (true) {
          if (h.stack.empty()) break;  // complete
          Frame& top = h.stack.back();
          if (top.awaiting_left) {
            h.goal = goal_right(tp, top.q, top.c, top.e_op, g, params);
            top.awaiting_left = false;
            top.g_left = g;
            break;
          }
          g = subtree_summary(tp, top.e_op, top.g_left, g, params);
          h.stack.pop_back();
        }
      }
      next.push_back(std::move(h));
    }
    live = std::move(next);
  }

  std::sort(live.begin(), live.end(), [](const Hyp& a, const Hyp& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    return std::lexicographical_compare(a.token_ids.begin(), a.token_ids.end(),
                                        b.token_ids.begin(), b.token_ids.end());
  });

  std::vector<DecodeTrace> out;
  out.reserve(live.size());
  for (const Hyp& h : live) {
    DecodeTrace t;
    t.token_ids = h.token_ids;
    for (int id : h.token_ids) t.tokens.push_back(vocab.tokens[id]);
    t.log_prob = h.logp;
    out.push_back(std::move(t));
  }
  return out;
}

// ---- Loss ----------------------------------------------------------------

enum class BufferLoss { Sum, Mean };

// Negative log-likelihood of every tree in `trees`, teacher-forced under
// the same masks decoding uses. Gradients land in the parameter tensors.
inline double loss_and_grads(Tape& tp, const Problem& prob, const Vocab& vocab,
                             PolicyParams& params, const std::vector<ExprTree>& trees,
                             BufferLoss agg = BufferLoss::Sum, double weight = 1.0) {
  if (trees.empty()) throw std::invalid_argument("empty tree set");
  tp.reset();
  params.zero_grads();
  Encoded enc = encode(tp, prob, params);

  Tape::Ref total = tp.constant(0.0);
  for (const ExprTree& tree : trees) {
    std::vector<Tape::Ref> picks;
    forced_trace(tp, prob, vocab, params, enc, tree, &picks);
    Tape::Ref nll = tp.constant(0.0);
    for (Tape::Ref p : picks) nll = tp.add(nll, p);
    total = tp.add(total, tp.scale(nll, -1.0));
  }
  if (agg == BufferLoss::Mean) total = tp.scale(total, 1.0 / static_cast<double>(trees.size()));
  if (weight != 1.0) total = tp.scale(total, weight);
  tp.backward(total);
  return tp.scalar(total);
}

// Loss only (no backward); used by evaluation and tests.
inline double tree_log_prob(Tape& tp, const Problem& prob, const Vocab& vocab,
                            PolicyParams& params, const ExprTree& tree) {
  tp.reset();
  Encoded enc = encode(tp, prob, params);
  return forced_trace(tp, prob, vocab, params, enc, tree).log_prob;
}

// ---- Checkpoints ---------------------------------------------------------

inline void save_checkpoint(const PolicyParams& params, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os << "treefix-checkpoint 1\n";
  os << "d " << params.d << "\n";
  os << "words " << params.word_list.size() << "\n";
  for (const auto& w : params.word_list) os << w << "\n";
  char buf[64];
  const_cast<PolicyParams&>(params).visit([&](const std::string& name, Tensor& t) {
    os << "tensor " << name << " " << t.rows << " " << t.cols << "\n";
    for (int i = 0; i < t.count(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", t.v[i]);
      os << buf << (i + 1 == t.count() ? "" : " ");
    }
    os << "\n";
  });
}

inline PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  std::string magic;
  int version = 0;
  is >> magic >> version;
  if (magic != "treefix-checkpoint" || version != 1)
    throw std::runtime_error("unrecognized checkpoint format");
  std::string key;
  int d = 0;
  is >> key >> d;
  size_t n_words = 0;
  is >> key >> n_words;
  std::vector<std::string> words(n_words);
  for (auto& w : words) is >> w;

  // init with the stored words minus the two specials it re-adds
  PolicyParams p = PolicyParams::init(d, {words.begin() + 2, words.end()}, 0);
  p.visit([&](const std::string& name, Tensor& t) {
    std::string tag, got;
    int r = 0, c = 0;
    is >> tag >> got >> r >> c;
    if (tag != "tensor" || got != name || r != t.rows || c != t.cols)
      throw std::runtime_error("checkpoint tensor mismatch at " + name);
    for (auto& x : t.v) is >> x;
  });
  if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  return p;
}

}  // namespace treefix
