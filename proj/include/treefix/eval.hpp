#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treefix/data.hpp"
#include "treefix/expr.hpp"
#include "treefix/policy.hpp"
#include "treefix/tree_reg.hpp"

namespace treefix {

struct Candidate {
  std::string prefix;
  double log_prob = 0.0;
  std::optional<double> value;  // empty on execution error or pad
  bool correct = false;
  bool pad = false;
};

struct ProblemEval {
  std::string id;
  double answer = 0.0;
  std::vector<Candidate> candidates;  // ranked best-first, padded to k_max
  int pads = 0;
};

struct EvalReport {
  int n_problems = 0;
  int exec_errors = 0;
  int total_pads = 0;
  std::map<int, double> acc;            // all-top-k-correct (primary metric)
  std::map<int, double> mean_rank_acc;  // mean per-rank accuracy (alternative)
  std::vector<ProblemEval> problems;
};

// Fraction of problems whose top-k candidates are all correct.
inline double acc_at_k(const std::vector<ProblemEval>& problems, int k) {
  if (problems.empty()) return 0.0;
  int hit = 0;
  for (const auto& pe : problems) {
    bool all = true;
    for (int r = 0; r < k; ++r)
      all = all && r < static_cast<int>(pe.candidates.size()) && pe.candidates[r].correct;
    hit += all;
  }
  return static_cast<double>(hit) / problems.size();
}

// Average over ranks r < k of the rank-r answer accuracy.
inline double mean_rank_acc_at_k(const std::vector<ProblemEval>& problems, int k) {
  if (problems.empty()) return 0.0;
  double acc = 0.0;
  for (int r = 0; r < k; ++r) {
    int hit = 0;
    for (const auto& pe : problems)
      hit += r < static_cast<int>(pe.candidates.size()) && pe.candidates[r].correct;
    acc += static_cast<double>(hit) / problems.size();
  }
  return acc / k;
}

// Runs one beam per target size in the prior range, merges the completed
// sequences by total log-probability, and keeps the top `beam_width`.
inline std::vector<DecodeTrace> beam_candidates(Tape& tp, const Problem& prob,
                                                PolicyParams& params, const SizePrior& prior,
                                                int beam_width) {
  const Vocab vocab = Vocab::standard(static_cast<int>(prob.quantities.size()));
  auto [lo, hi] = size_bounds(static_cast<int>(prob.quantities.size()), prior);

  std::vector<DecodeTrace> merged;
  for (int l = lo; l <= hi; l += 2) {
    tp.reset();
    for (DecodeTrace& t : decode_beam(tp, prob, vocab, params, l, beam_width))
      merged.push_back(std::move(t));
  }
  std::sort(merged.begin(), merged.end(), [](const DecodeTrace& a, const DecodeTrace& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return std::lexicographical_compare(a.token_ids.begin(), a.token_ids.end(),
                                        b.token_ids.begin(), b.token_ids.end());
  });
  if (static_cast<int>(merged.size()) > beam_width) merged.resize(beam_width);
  return merged;
}

inline EvalReport evaluate_policy(Tape& tp, const Corpus& corpus, std::span<const int> indices,
                                  PolicyParams& params, const SizePrior& prior, int beam_width) {
  EvalReport report;
  report.n_problems = static_cast<int>(indices.size());

  for (int idx : indices) {
    const Problem& p = corpus.problems[idx];
    ProblemEval pe;
    pe.id = p.id;
    pe.answer = p.answer;

    for (const DecodeTrace& t : beam_candidates(tp, p, params, prior, beam_width)) {
      Candidate c;
      ExprTree tree = parse_prefix(t.tokens);
      c.prefix = to_prefix_string(tree);
      c.log_prob = t.log_prob;
      EvalResult r = evaluate(tree, p.quantity_values());
      if (r.ok()) {
        c.value = r.value;
        c.correct = answers_match(r.value, p.answer);
      } else {
        ++report.exec_errors;
      }
      pe.candidates.push_back(std::move(c));
    }
    while (static_cast<int>(pe.candidates.size()) < beam_width) {
      Candidate c;
      c.pad = true;
      pe.candidates.push_back(std::move(c));
      ++pe.pads;
    }
    report.total_pads += pe.pads;
    report.problems.push_back(std::move(pe));
  }

  for (int k : {1, 3, 5}) {
    if (k > beam_width) continue;
    report.acc[k] = acc_at_k(report.problems, k);
    report.mean_rank_acc[k] = mean_rank_acc_at_k(report.problems, k);
  }
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["version"] = 1;
  j["n_problems"] = report.n_problems;
  j["exec_errors"] = report.exec_errors;
  j["pads"] = report.total_pads;
  for (const auto& [k, v] : report.acc) j["acc"][std::to_string(k)] = v;
  for (const auto& [k, v] : report.mean_rank_acc) j["mean_rank_acc"][std::to_string(k)] = v;
  j["problems"] = nlohmann::json::array();
  for (const auto& pe : report.problems) {
    nlohmann::json pj;
    pj["id"] = pe.id;
    pj["answer"] = pe.answer;
    pj["pads"] = pe.pads;
    pj["candidates"] = nlohmann::json::array();
    for (const auto& c : pe.candidates) {
      nlohmann::json cj;
      cj["prefix"] = c.prefix;
      cj["log_prob"] = c.log_prob;
      if (c.value)
        cj["value"] = *c.value;
      else
        cj["value"] = nullptr;
      cj["correct"] = c.correct;
      cj["pad"] = c.pad;
      pj["candidates"].push_back(std::move(cj));
    }
    j["problems"].push_back(std::move(pj));
  }
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport report;
  report.n_problems = j.at("n_problems").get<int>();
  report.exec_errors = j.at("exec_errors").get<int>();
  report.total_pads = j.at("pads").get<int>();
  for (const auto& [k, v] : j.at("acc").items()) report.acc[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("mean_rank_acc").items())
    report.mean_rank_acc[std::stoi(k)] = v.get<double>();
  for (const auto& pj : j.at("problems")) {
    ProblemEval pe;
    pe.id = pj.at("id").get<std::string>();
    pe.answer = pj.at("answer").get<double>();
    pe.pads = pj.at("pads").get<int>();
    for (const auto& cj : pj.at("candidates")) {
      Candidate c;
      c.prefix = cj.at("prefix").get<std::string>();
      c.log_prob = cj.at("log_prob").get<double>();
      if (!cj.at("value").is_null()) c.value = cj.at("value").get<double>();
      c.correct = cj.at("correct").get<bool>();
      c.pad = cj.at("pad").get<bool>();
      pe.candidates.push_back(std::move(c));
    }
    report.problems.push_back(std::move(pe));
  }
  return report;
}

// Recomputes every headline number from the per-problem dump; true when
// they all agree with the stored values.
inline bool verify_report_integrity(const EvalReport& report, std::string* why = nullptr) {
  auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  if (static_cast<int>(report.problems.size()) != report.n_problems)
    return fail("n_problems mismatch");
  int pads = 0;
  for (const auto& pe : report.problems)
    for (const auto& c : pe.candidates) pads += c.pad;
  if (pads != report.total_pads) return fail("pad count mismatch");
  for (const auto& [k, v] : report.acc)
    if (std::fabs(acc_at_k(report.problems, k) - v) > 1e-12)
      return fail("acc@" + std::to_string(k) + " not recomputable");
  for (const auto& [k, v] : report.mean_rank_acc)
    if (std::fabs(mean_rank_acc_at_k(report.problems, k) - v) > 1e-12)
      return fail("mean_rank_acc@" + std::to_string(k) + " not recomputable");
  return true;
}

}  // namespace treefix
