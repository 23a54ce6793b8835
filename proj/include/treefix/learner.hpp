#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "treefix/data.hpp"
#include "treefix/expr.hpp"
#include "treefix/fixer.hpp"
#include "treefix/policy.hpp"
#include "treefix/tree_reg.hpp"

namespace treefix {

// Per-problem store of verified solutions, deduplicated by prefix string.
// Every insert re-executes the tree against the problem's answer.
class MemoryBuffer {
 public:
  bool insert(const Problem& p, const ExprTree& tree) {
    if (!verified(p, tree)) {
      ++rejected_;
      return false;
    }
    auto& v = entries_[p.id];
    std::string key = to_prefix_string(tree);
    if (std::find(v.begin(), v.end(), key) != v.end()) return false;
    v.push_back(std::move(key));
    return true;
  }

  // Capacity-one variant: the newest verified solution replaces the store.
  bool replace_latest(const Problem& p, const ExprTree& tree) {
    if (!verified(p, tree)) {
      ++rejected_;
      return false;
    }
    entries_[p.id] = {to_prefix_string(tree)};
    return true;
  }

  bool contains(const std::string& id, const ExprTree& tree) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) return false;
    std::string key = to_prefix_string(tree);
    return std::find(it->second.begin(), it->second.end(), key) != it->second.end();
  }

  const std::vector<std::string>& strings_for(const std::string& id) const {
    static const std::vector<std::string> empty;
    auto it = entries_.find(id);
    return it == entries_.end() ? empty : it->second;
  }

  std::vector<ExprTree> trees_for(const std::string& id) const {
    std::vector<ExprTree> out;
    for (const auto& s : strings_for(id)) out.push_back(parse_prefix_string(s));
    return out;
  }

  size_t count_for(const std::string& id) const { return strings_for(id).size(); }

  size_t total() const {
    size_t n = 0;
    for (const auto& [id, v] : entries_) n += v.size();
    return n;
  }

  long rejected_unverified() const { return rejected_; }

  void dump(std::ostream& os, const std::vector<Problem>& order) const {
    for (const auto& p : order)
      for (const auto& s : strings_for(p.id)) os << p.id << "\t" << s << "\n";
  }

 private:
  bool verified(const Problem& p, const ExprTree& tree) const {
    EvalResult r = evaluate(tree, p.quantity_values());
    return r.ok() && answers_match(r.value, p.answer);
  }

  std::map<std::string, std::vector<std::string>> entries_;
  long rejected_ = 0;
};

enum class Strategy { LBF, LBFNoMem, Reinforce, MAPO, LBFFully };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::LBF: return "lbf";
    case Strategy::LBFNoMem: return "lbf-nomem";
    case Strategy::Reinforce: return "reinforce";
    case Strategy::MAPO: return "mapo";
    case Strategy::LBFFully: return "lbf-fully";
  }
  return "?";
}

inline std::optional<Strategy> strategy_from_name(const std::string& s) {
  if (s == "lbf") return Strategy::LBF;
  if (s == "lbf-nomem") return Strategy::LBFNoMem;
  if (s == "reinforce") return Strategy::Reinforce;
  if (s == "mapo") return Strategy::MAPO;
  if (s == "lbf-fully") return Strategy::LBFFully;
  return std::nullopt;
}

struct TrainConfig {
  Strategy strategy = Strategy::LBF;
  int epochs = 30;
  int m_steps = 50;
  SizePrior prior;
  uint64_t seed = 7;
  double learning_rate = 0.01;
  int beam_width = 5;
  double mapo_clip = 0.1;
  int hidden_dim = 64;
  BufferLoss buffer_loss = BufferLoss::Sum;
  bool sample_exploration = false;
  double clip_norm = 5.0;
  enum class Optim { SGD, Adam } optimizer = Optim::SGD;
};

struct EpochStats {
  int epoch = 0;
  double train_accuracy = 0.0;  // exploration decodes that hit the answer
  int fixes_found = 0;
  double mean_buffer_size = 0.0;
  double mean_loss = 0.0;
};

// Audit counters: gradient steps must come either from verified buffer
// trees or from likelihood-ratio sample terms, never elsewhere.
struct AuditCounters {
  long buffer_updates = 0;
  long sample_updates = 0;
  long gold_skipped = 0;
};

class Optimizer {
 public:
  explicit Optimizer(TrainConfig::Optim kind) : kind_(kind) {}

  void step(PolicyParams& params, double lr, double clip_norm) {
    double sq = 0.0;
    params.visit([&](const std::string&, Tensor& t) {
      for (double g : t.g) sq += g * g;
    });
    double norm = std::sqrt(sq);
    double scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

    if (kind_ == TrainConfig::Optim::SGD) {
      params.visit([&](const std::string&, Tensor& t) {
        for (int i = 0; i < t.count(); ++i) t.v[i] -= lr * scale * t.g[i];
      });
      return;
    }

    ++t_;
    int slot = 0;
    params.visit([&](const std::string&, Tensor& t) {
      if (slot >= static_cast<int>(m_.size())) {
        m_.emplace_back(t.count(), 0.0);
        v_.emplace_back(t.count(), 0.0);
      }
      auto& m = m_[slot];
      auto& v = v_[slot];
      const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double bc1 = 1.0 - std::pow(b1, t_), bc2 = 1.0 - std::pow(b2, t_);
      for (int i = 0; i < t.count(); ++i) {
        double g = scale * t.g[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        t.v[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      }
      ++slot;
    });
  }

 private:
  TrainConfig::Optim kind_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Weighted teacher-forced loss: sum_i w_i * NLL(tree_i). Shared by the
// MAPO objective, whose buffer and sample terms carry different weights.
inline double weighted_loss_and_grads(Tape& tp, const Problem& prob, const Vocab& vocab,
                                      PolicyParams& params,
                                      const std::vector<std::pair<ExprTree, double>>& terms) {
  tp.reset();
  params.zero_grads();
  Encoded enc = encode(tp, prob, params);
  Tape::Ref total = tp.constant(0.0);
  for (const auto& [tree, w] : terms) {
    std::vector<Tape::Ref> picks;
    forced_trace(tp, prob, vocab, params, enc, tree, &picks);
    Tape::Ref nll = tp.constant(0.0);
    for (Tape::Ref p : picks) nll = tp.add(nll, p);
    total = tp.add(total, tp.scale(nll, -w));
  }
  tp.backward(total);
  return tp.scalar(total);
}

// One training run over a corpus with a fixed strategy. Strictly
// single-threaded and deterministic for a given config.
class Trainer {
 public:
  Trainer(const Corpus& corpus, TrainConfig cfg)
      : corpus_(corpus),
        cfg_(cfg),
        rng_(cfg.seed),
        opt_(cfg.optimizer) {
    std::vector<Problem> train_problems;
    for (int i : corpus_.indices(Split::Train)) train_problems.push_back(corpus_.problems[i]);
    params_ = PolicyParams::init(cfg.hidden_dim, collect_words(train_problems), cfg.seed + 1);
    if (cfg_.strategy == Strategy::LBFFully) init_buffers_fully();
  }

  // Seeds every buffer with the problem's gold expression when it verifies
  // against the stated answer; mismatching or missing golds are counted.
  void init_buffers_fully() {
    for (int i : corpus_.indices(Split::Train)) {
      const Problem& p = corpus_.problems[i];
      if (p.gold_prefix.empty()) {
        ++audit_.gold_skipped;
        continue;
      }
      ExprTree gold;
      try {
        gold = parse_prefix_string(p.gold_prefix);
      } catch (const ParseError&) {
        ++audit_.gold_skipped;
        continue;
      }
      if (!buffers_.insert(p, gold)) ++audit_.gold_skipped;
    }
  }

  EpochStats run_epoch() {
    std::vector<int> order = corpus_.indices(Split::Train);
    std::shuffle(order.begin(), order.end(), rng_);

    EpochStats stats;
    stats.epoch = ++epoch_;
    int correct = 0, visited = 0;
    double loss_sum = 0.0;
    int loss_count = 0;

    for (int idx : order) {
      const Problem& p = corpus_.problems[idx];
      double loss = 0.0;
      bool updated = false;
      bool exploration_correct = false;
      switch (cfg_.strategy) {
        case Strategy::LBF:
        case Strategy::LBFNoMem:
        case Strategy::LBFFully:
          exploration_correct = lbf_visit(p, stats, loss, updated);
          break;
        case Strategy::Reinforce:
          exploration_correct = reinforce_step(p, loss, updated);
          break;
        case Strategy::MAPO:
          exploration_correct = mapo_step(p, loss, updated);
          break;
      }
      ++visited;
      correct += exploration_correct;
      if (updated) {
        loss_sum += loss;
        ++loss_count;
      }
    }

    stats.train_accuracy = visited ? static_cast<double>(correct) / visited : 0.0;
    size_t n_train = corpus_.indices(Split::Train).size();
    stats.mean_buffer_size = n_train ? static_cast<double>(buffers_.total()) / n_train : 0.0;
    stats.mean_loss = loss_count ? loss_sum / loss_count : 0.0;
    return stats;
  }

  // Exploration + fixing + one buffer gradient step for one problem.
  bool lbf_visit(const Problem& p, EpochStats& stats, double& loss, bool& updated) {
    const Vocab vocab = Vocab::standard(static_cast<int>(p.quantities.size()));
    const std::vector<double> qvals = p.quantity_values();
    const int l = sample_target_size(p);

    tape_.reset();
    DecodeTrace trace = cfg_.sample_exploration
                            ? decode_sample(tape_, p, vocab, params_, l, rng_)
                            : decode_greedy(tape_, p, vocab, params_, l);
    ExprTree tree = trace.tree();
    EvalResult ev = evaluate(tree, qvals);
    bool correct = ev.ok() && answers_match(ev.value, p.answer);

    TreeAnnotator annotator = [&](const ExprTree& t) {
      return annotate_dists(tape_, p, vocab, params_, t);
    };
    auto fix = m_fix(tree, vocab, qvals, p.answer, cfg_.m_steps, annotator, rng_);
    if (fix) {
      ++stats.fixes_found;
      if (cfg_.strategy == Strategy::LBFNoMem)
        buffers_.replace_latest(p, fix->tree);
      else
        buffers_.insert(p, fix->tree);
    }

    std::vector<ExprTree> trees = buffers_.trees_for(p.id);
    if (!trees.empty()) {
      loss = loss_and_grads(tape_, p, vocab, params_, trees, cfg_.buffer_loss);
      opt_.step(params_, cfg_.learning_rate, cfg_.clip_norm);
      ++audit_.buffer_updates;
      updated = true;
    }
    return correct;
  }

  // Single-sample likelihood-ratio step with a running-mean baseline.
  bool reinforce_step(const Problem& p, double& loss, bool& updated) {
    const Vocab vocab = Vocab::standard(static_cast<int>(p.quantities.size()));
    const int l = sample_target_size(p);

    tape_.reset();
    DecodeTrace trace = decode_sample(tape_, p, vocab, params_, l, rng_);
    ExprTree tree = trace.tree();
    EvalResult ev = evaluate(tree, p.quantity_values());
    const double reward = (ev.ok() && answers_match(ev.value, p.answer)) ? 1.0 : 0.0;
    const double coeff = reward - baseline_;
    push_reward(reward);

    if (coeff != 0.0) {
      loss = weighted_loss_and_grads(tape_, p, vocab, params_, {{tree, coeff}});
      opt_.step(params_, cfg_.learning_rate, cfg_.clip_norm);
      ++audit_.sample_updates;
      updated = true;
    }
    return reward == 1.0;
  }

  // Buffer expectation (weight clipped from below) plus an outside-buffer
  // likelihood-ratio term; rewarding on-policy samples join the buffer.
  bool mapo_step(const Problem& p, double& loss, bool& updated) {
    const Vocab vocab = Vocab::standard(static_cast<int>(p.quantities.size()));
    const int l = sample_target_size(p);

    std::vector<ExprTree> buffer_trees = buffers_.trees_for(p.id);
    double w = 0.0;
    if (!buffer_trees.empty()) {
      double p_buffer = 0.0;
      for (const ExprTree& t : buffer_trees)
        p_buffer += std::exp(tree_log_prob(tape_, p, vocab, params_, t));
      p_buffer = std::min(1.0, p_buffer);
      w = std::max(cfg_.mapo_clip, p_buffer);
    }

    tape_.reset();
    DecodeTrace trace = decode_sample(tape_, p, vocab, params_, l, rng_);
    ExprTree tree = trace.tree();
    EvalResult ev = evaluate(tree, p.quantity_values());
    const double reward = (ev.ok() && answers_match(ev.value, p.answer)) ? 1.0 : 0.0;
    const bool in_buffer = buffers_.contains(p.id, tree);
    const double coeff = reward - baseline_;
    push_reward(reward);

    std::vector<std::pair<ExprTree, double>> terms;
    for (const ExprTree& t : buffer_trees)
      terms.emplace_back(t, w / static_cast<double>(buffer_trees.size()));
    if (!in_buffer && coeff != 0.0) terms.emplace_back(tree, (1.0 - w) * coeff);

    if (!terms.empty()) {
      loss = weighted_loss_and_grads(tape_, p, vocab, params_, terms);
      opt_.step(params_, cfg_.learning_rate, cfg_.clip_norm);
      if (!buffer_trees.empty()) ++audit_.buffer_updates;
      if (!in_buffer && coeff != 0.0) ++audit_.sample_updates;
      updated = true;
    }
    if (reward == 1.0 && !in_buffer) buffers_.insert(p, tree);
    return reward == 1.0;
  }

  int sample_target_size(const Problem& p) {
    auto [lo, hi] = size_bounds(static_cast<int>(p.quantities.size()), cfg_.prior);
    int steps = (hi - lo) / 2;
    return lo + 2 * std::uniform_int_distribution<int>(0, steps)(rng_);
  }

  const Corpus& corpus() const { return corpus_; }
  const TrainConfig& config() const { return cfg_; }
  PolicyParams& params() { return params_; }
  MemoryBuffer& buffers() { return buffers_; }
  const AuditCounters& audit() const { return audit_; }
  Tape& tape() { return tape_; }
  double baseline() const { return baseline_; }

 private:
  void push_reward(double r) {
    ++reward_count_;
    baseline_ += (r - baseline_) / static_cast<double>(reward_count_);
  }

  Corpus corpus_;
  TrainConfig cfg_;
  PolicyParams params_;
  MemoryBuffer buffers_;
  std::mt19937_64 rng_;
  Tape tape_;
  Optimizer opt_;
  AuditCounters audit_;
  double baseline_ = 0.0;
  long reward_count_ = 0;
  int epoch_ = 0;
};

}  // namespace treefix
