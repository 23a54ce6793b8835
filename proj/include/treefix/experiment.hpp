#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treefix/data.hpp"
#include "treefix/eval.hpp"
#include "treefix/learner.hpp"

namespace treefix {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& msg)
      : std::runtime_error(field + ": " + msg) {}
};

// Experiment description: a corpus, a strategy grid, and shared training
// hyperparameters. Versioned JSON on disk.
struct RunConfig {
  uint64_t seed = 7;
  std::string corpus_path;
  std::string out_dir = "runs";
  int epochs = 30;
  double learning_rate = 0.01;
  int hidden_dim = 64;
  int eval_beam_width = 5;
  double mapo_clip = 0.1;
  double clip_norm = 5.0;
  bool sample_exploration = false;
  BufferLoss buffer_loss = BufferLoss::Sum;
  TrainConfig::Optim optimizer = TrainConfig::Optim::SGD;
  std::vector<Strategy> strategies{Strategy::LBF};
  std::vector<int> m_steps{50};
  std::vector<SizePrior> size_priors{SizePrior{}};
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != 1)
    throw ConfigError("version", "required and must be 1");

  auto get_int = [&](const char* field, int def, int lo) {
    if (!j.contains(field)) return def;
    if (!j[field].is_number_integer()) throw ConfigError(field, "must be an integer");
    int v = j[field].get<int>();
    if (v < lo) throw ConfigError(field, "must be >= " + std::to_string(lo));
    return v;
  };
  auto get_num = [&](const char* field, double def, double lo) {
    if (!j.contains(field)) return def;
    if (!j[field].is_number()) throw ConfigError(field, "must be a number");
    double v = j[field].get<double>();
    if (v < lo) throw ConfigError(field, "must be >= " + std::to_string(lo));
    return v;
  };

  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer())
      throw ConfigError("seed", "must be an integer");
    cfg.seed = j["seed"].get<uint64_t>();
  }
  if (j.contains("corpus")) {
    if (!j["corpus"].is_string()) throw ConfigError("corpus", "must be a path string");
    cfg.corpus_path = j["corpus"].get<std::string>();
  }
  if (cfg.corpus_path.empty()) throw ConfigError("corpus", "required");
  if (j.contains("out_dir")) {
    if (!j["out_dir"].is_string()) throw ConfigError("out_dir", "must be a string");
    cfg.out_dir = j["out_dir"].get<std::string>();
  }
  cfg.epochs = get_int("epochs", cfg.epochs, 1);
  cfg.learning_rate = get_num("learning_rate", cfg.learning_rate, 1e-9);
  cfg.hidden_dim = get_int("hidden_dim", cfg.hidden_dim, 2);
  cfg.eval_beam_width = get_int("eval_beam_width", cfg.eval_beam_width, 1);
  cfg.mapo_clip = get_num("mapo_clip", cfg.mapo_clip, 0.0);
  cfg.clip_norm = get_num("clip_norm", cfg.clip_norm, 0.0);

  if (j.contains("exploration")) {
    std::string e = j["exploration"].get<std::string>();
    if (e == "sample")
      cfg.sample_exploration = true;
    else if (e == "greedy")
      cfg.sample_exploration = false;
    else
      throw ConfigError("exploration", "must be \"greedy\" or \"sample\"");
  }
  if (j.contains("buffer_loss")) {
    std::string b = j["buffer_loss"].get<std::string>();
    if (b == "sum")
      cfg.buffer_loss = BufferLoss::Sum;
    else if (b == "mean")
      cfg.buffer_loss = BufferLoss::Mean;
    else
      throw ConfigError("buffer_loss", "must be \"sum\" or \"mean\"");
  }
  if (j.contains("optimizer")) {
    std::string o = j["optimizer"].get<std::string>();
    if (o == "sgd")
      cfg.optimizer = TrainConfig::Optim::SGD;
    else if (o == "adam")
      cfg.optimizer = TrainConfig::Optim::Adam;
    else
      throw ConfigError("optimizer", "must be \"sgd\" or \"adam\"");
  }
  if (j.contains("strategies")) {
    if (!j["strategies"].is_array() || j["strategies"].empty())
      throw ConfigError("strategies", "must be a non-empty array");
    cfg.strategies.clear();
    for (size_t i = 0; i < j["strategies"].size(); ++i) {
      auto s = strategy_from_name(j["strategies"][i].get<std::string>());
      if (!s)
        throw ConfigError("strategies[" + std::to_string(i) + "]",
                          "unknown strategy (lbf, lbf-nomem, reinforce, mapo, lbf-fully)");
      cfg.strategies.push_back(*s);
    }
  }
  if (j.contains("m_steps")) {
    if (!j["m_steps"].is_array() || j["m_steps"].empty())
      throw ConfigError("m_steps", "must be a non-empty array of integers >= 1");
    cfg.m_steps.clear();
    for (size_t i = 0; i < j["m_steps"].size(); ++i) {
      int m = j["m_steps"][i].get<int>();
      if (m < 1) throw ConfigError("m_steps[" + std::to_string(i) + "]", "must be >= 1");
      cfg.m_steps.push_back(m);
    }
  }
  if (j.contains("size_priors")) {
    if (!j["size_priors"].is_array() || j["size_priors"].empty())
      throw ConfigError("size_priors", "must be a non-empty array of [a_min,b_min,a_max,b_max]");
    cfg.size_priors.clear();
    for (size_t i = 0; i < j["size_priors"].size(); ++i) {
      const auto& e = j["size_priors"][i];
      if (!e.is_array() || e.size() != 4)
        throw ConfigError("size_priors[" + std::to_string(i) + "]",
                          "must be [a_min,b_min,a_max,b_max]");
      cfg.size_priors.push_back(
          SizePrior{e[0].get<int>(), e[1].get<int>(), e[2].get<int>(), e[3].get<int>()});
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("<file>", "cannot open config: " + path);
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError("<file>", "invalid JSON: " + path);
  return parse_run_config(j);
}

inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string run_key(Strategy s, int m, const SizePrior& p) {
  std::ostringstream os;
  os << strategy_name(s) << "_m" << m << "_p" << p.a_min << "_" << p.b_min << "_" << p.a_max
     << "_" << p.b_max;
  return os.str();
}

struct RunResult {
  std::string key;
  std::vector<EpochStats> curve;
  EvalReport train_report;
  EvalReport test_report;
};

inline TrainConfig make_train_config(const RunConfig& cfg, Strategy s, int m,
                                     const SizePrior& prior) {
  TrainConfig tc;
  tc.strategy = s;
  tc.epochs = cfg.epochs;
  tc.m_steps = m;
  tc.prior = prior;
  tc.seed = cfg.seed;
  tc.learning_rate = cfg.learning_rate;
  tc.beam_width = cfg.eval_beam_width;
  tc.mapo_clip = cfg.mapo_clip;
  tc.hidden_dim = cfg.hidden_dim;
  tc.buffer_loss = cfg.buffer_loss;
  tc.sample_exploration = cfg.sample_exploration;
  tc.clip_norm = cfg.clip_norm;
  tc.optimizer = cfg.optimizer;
  return tc;
}

// Trains one configuration and evaluates both splits with the beam metric.
inline RunResult execute_run(const Corpus& corpus, const RunConfig& cfg, Strategy s, int m,
                             const SizePrior& prior, std::ostream* log = nullptr) {
  RunResult result;
  result.key = run_key(s, m, prior);

  Trainer trainer(corpus, make_train_config(cfg, s, m, prior));
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochStats st = trainer.run_epoch();
    result.curve.push_back(st);
    if (log)
      *log << result.key << " epoch " << st.epoch << " acc=" << st.train_accuracy
           << " fixes=" << st.fixes_found << " buf=" << st.mean_buffer_size
           << " loss=" << st.mean_loss << "\n";
  }

  auto train_idx = corpus.indices(Split::Train);
  auto test_idx = corpus.indices(Split::Test);
  result.train_report = evaluate_policy(trainer.tape(), corpus, train_idx, trainer.params(),
                                        prior, cfg.eval_beam_width);
  result.test_report = evaluate_policy(trainer.tape(), corpus, test_idx, trainer.params(), prior,
                                       cfg.eval_beam_width);
  return result;
}

inline std::string curve_to_csv(const std::vector<EpochStats>& curve, const std::string& name) {
  std::string out = "epoch,strategy,train_accuracy,fixes_found,mean_buffer_size,loss\n";
  for (const EpochStats& st : curve) {
    out += std::to_string(st.epoch) + "," + name + "," + fmt_g17(st.train_accuracy) + "," +
           std::to_string(st.fixes_found) + "," + fmt_g17(st.mean_buffer_size) + "," +
           fmt_g17(st.mean_loss) + "\n";
  }
  return out;
}

// Runs the full strategy/m/prior grid, writing per-run curves (CSV),
// evaluation reports (JSON), checkpoints, and buffer dumps.
inline std::vector<RunResult> run_experiment(const RunConfig& cfg, std::ostream* log = nullptr) {
  Corpus corpus = load_math23k(cfg.corpus_path);
  std::filesystem::create_directories(cfg.out_dir);

  std::vector<RunResult> results;
  for (Strategy s : cfg.strategies) {
    for (int m : cfg.m_steps) {
      for (const SizePrior& prior : cfg.size_priors) {
        Trainer trainer(corpus, make_train_config(cfg, s, m, prior));
        RunResult result;
        result.key = run_key(s, m, prior);

        std::string csv_path = cfg.out_dir + "/curve_" + result.key + ".csv";
        std::ofstream csv(csv_path);
        csv << "epoch,strategy,train_accuracy,fixes_found,mean_buffer_size,loss\n";
        for (int e = 0; e < cfg.epochs; ++e) {
          EpochStats st = trainer.run_epoch();
          csv << st.epoch << "," << strategy_name(s) << "," << fmt_g17(st.train_accuracy) << ","
              << st.fixes_found << "," << fmt_g17(st.mean_buffer_size) << ","
              << fmt_g17(st.mean_loss) << "\n";
          csv.flush();  // keep partial curves on interrupt
          result.curve.push_back(st);
          if (log)
            *log << result.key << " epoch " << st.epoch << " acc=" << st.train_accuracy
                 << " fixes=" << st.fixes_found << " loss=" << st.mean_loss << std::endl;
        }

        auto train_idx = corpus.indices(Split::Train);
        auto test_idx = corpus.indices(Split::Test);
        result.train_report = evaluate_policy(trainer.tape(), corpus, train_idx,
                                              trainer.params(), prior, cfg.eval_beam_width);
        result.test_report = evaluate_policy(trainer.tape(), corpus, test_idx, trainer.params(),
                                             prior, cfg.eval_beam_width);

        std::ofstream(cfg.out_dir + "/eval_" + result.key + "_train.json")
            << report_to_json(result.train_report).dump(1) << "\n";
        std::ofstream(cfg.out_dir + "/eval_" + result.key + "_test.json")
            << report_to_json(result.test_report).dump(1) << "\n";
        save_checkpoint(trainer.params(), cfg.out_dir + "/ckpt_" + result.key + ".txt");
        std::ofstream buf(cfg.out_dir + "/buffers_" + result.key + ".txt");
        trainer.buffers().dump(buf, corpus.problems);

        results.push_back(std::move(result));
      }
    }
  }
  return results;
}

// Fraction of gold expressions whose token count falls inside the size
// prior for their problem's quantity count.
struct SizeCoverage {
  int with_gold = 0;
  int covered = 0;
  double fraction() const { return with_gold ? static_cast<double>(covered) / with_gold : 0.0; }
};

inline SizeCoverage gold_size_coverage(const Corpus& corpus, const SizePrior& prior) {
  SizeCoverage cov;
  for (const Problem& p : corpus.problems) {
    if (p.gold_size <= 0 || p.quantities.empty()) continue;
    ++cov.with_gold;
    auto [lo, hi] = size_bounds(static_cast<int>(p.quantities.size()), prior);
    if (p.gold_size >= lo && p.gold_size <= hi) ++cov.covered;
  }
  return cov;
}

}  // namespace treefix
