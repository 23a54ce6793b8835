#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treefix/expr.hpp"
#include "treefix/tree_reg.hpp"

namespace treefix {

// ---- numeric token recognition --------------------------------------------

inline std::optional<double> parse_plain_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* c = s.c_str();
  char* end = nullptr;
  double v = std::strtod(c, &end);
  if (end != c + s.size()) return std::nullopt;
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

// Accepts plain numbers, percents ("15%" -> 0.15), and parenthesized
// fractions ("(1/5)" -> 0.2), the forms Math23K text and answers use.
inline std::optional<double> parse_numeric_token(const std::string& s) {
  if (s.empty()) return std::nullopt;
  if (s.back() == '%') {
    auto v = parse_plain_number(s.substr(0, s.size() - 1));
    if (v) return *v / 100.0;
    return std::nullopt;
  }
  if (s.front() == '(' && s.back() == ')') {
    auto slash = s.find('/');
    if (slash != std::string::npos) {
      auto a = parse_plain_number(s.substr(1, slash - 1));
      auto b = parse_plain_number(s.substr(slash + 1, s.size() - slash - 2));
      if (a && b && *b != 0.0) return *a / *b;
    }
    return std::nullopt;
  }
  return parse_plain_number(s);
}

// Ordered (value, token position) list of the numeric mentions in the text.
inline std::vector<Quantity> extract_quantities(const std::vector<std::string>& words) {
  std::vector<Quantity> out;
  for (size_t i = 0; i < words.size(); ++i)
    if (auto v = parse_numeric_token(words[i])) out.push_back({*v, static_cast<int>(i)});
  return out;
}

// ---- corpus ----------------------------------------------------------------

enum class Split : uint8_t { Train, Test };

struct Corpus {
  std::vector<Problem> problems;
  std::vector<Split> split;  // parallel to problems
  std::string provenance;    // "math23k" or "synthetic"

  std::vector<int> indices(std::optional<Split> which = std::nullopt) const {
    std::vector<int> idx;
    for (size_t i = 0; i < problems.size(); ++i)
      if (!which || split[i] == *which) idx.push_back(static_cast<int>(i));
    return idx;
  }
};

// Seeded 80/20-style split assignment.
inline void assign_split(Corpus& corpus, double test_fraction, uint64_t seed) {
  const size_t n = corpus.problems.size();
  std::vector<int> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  size_t n_test = static_cast<size_t>(test_fraction * n);
  corpus.split.assign(n, Split::Train);
  for (size_t i = 0; i < n_test; ++i) corpus.split[idx[i]] = Split::Test;
}

// ---- infix equation parsing (gold expressions) -----------------------------

// Math23K-style equation strings ("x=(100/2)*(2+3.5)") parsed into a tree
// whose leaves are literal constants. Unary minus becomes (0 - x).
inline std::optional<ExprTree> parse_infix_equation(const std::string& equation) {
  std::string eq = equation;
  for (char& ch : eq) {
    if (ch == '[') ch = '(';
    if (ch == ']') ch = ')';
  }
  auto pos = eq.find('=');
  if (pos != std::string::npos) eq = eq.substr(pos + 1);

  struct Tok {
    enum { Num, Oper, LParen, RParen } kind;
    double value = 0.0;
    char op = 0;
  };
  std::vector<Tok> toks;
  size_t i = 0;
  auto prev_allows_operand = [&]() {
    return toks.empty() || toks.back().kind == Tok::Oper || toks.back().kind == Tok::LParen;
  };
  while (i < eq.size()) {
    char c = eq[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      size_t j = i;
      while (j < eq.size() && (std::isdigit(static_cast<unsigned char>(eq[j])) || eq[j] == '.')) ++j;
      double v = std::strtod(eq.substr(i, j - i).c_str(), nullptr);
      if (j < eq.size() && eq[j] == '%') {
        v /= 100.0;
        ++j;
      }
      toks.push_back({Tok::Num, v, 0});
      i = j;
      continue;
    }
    if (c == '(') {
      toks.push_back({Tok::LParen, 0, 0});
      ++i;
      continue;
    }
    if (c == ')') {
      toks.push_back({Tok::RParen, 0, 0});
      ++i;
      continue;
    }
    if (c == '+' || c == '-' || c == '*' || c == '/' || c == '^') {
      if (c == '-' && prev_allows_operand()) {
        toks.push_back({Tok::Num, 0.0, 0});  // unary minus -> 0 - x
      }
      toks.push_back({Tok::Oper, 0, c});
      ++i;
      continue;
    }
    return std::nullopt;  // unrecognized character
  }
  if (toks.empty()) return std::nullopt;

  // shunting-yard into a postfix value/op stream, then build the tree
  auto prec = [](char op) { return op == '^' ? 3 : (op == '*' || op == '/') ? 2 : 1; };
  std::vector<Tok> output;
  std::vector<char> ops;
  for (const Tok& t : toks) {
    switch (t.kind) {
      case Tok::Num: output.push_back(t); break;
      case Tok::Oper: {
        while (!ops.empty() && ops.back() != '(' &&
               (prec(ops.back()) > prec(t.op) ||
                (prec(ops.back()) == prec(t.op) && t.op != '^')))
          output.push_back({Tok::Oper, 0, ops.back()}), ops.pop_back();
        ops.push_back(t.op);
        break;
      }
      case Tok::LParen: ops.push_back('('); break;
      case Tok::RParen: {
        while (!ops.empty() && ops.back() != '(')
          output.push_back({Tok::Oper, 0, ops.back()}), ops.pop_back();
        if (ops.empty()) return std::nullopt;
        ops.pop_back();
        break;
      }
    }
  }
  while (!ops.empty()) {
    if (ops.back() == '(') return std::nullopt;
    output.push_back({Tok::Oper, 0, ops.back()});
    ops.pop_back();
  }

  std::vector<std::vector<Token>> stack;  // prefix token runs
  for (const Tok& t : output) {
    if (t.kind == Tok::Num) {
      stack.push_back({Token::constant(t.value)});
    } else {
      if (stack.size() < 2) return std::nullopt;
      std::vector<Token> rhs = std::move(stack.back());
      stack.pop_back();
      std::vector<Token> lhs = std::move(stack.back());
      stack.pop_back();
      Op op = t.op == '+'   ? Op::Add
              : t.op == '-' ? Op::Sub
              : t.op == '*' ? Op::Mul
              : t.op == '/' ? Op::Div
                            : Op::Pow;
      std::vector<Token> combined{Token::make_op(op)};
      combined.insert(combined.end(), lhs.begin(), lhs.end());
      combined.insert(combined.end(), rhs.begin(), rhs.end());
      stack.push_back(std::move(combined));
    }
  }
  if (stack.size() != 1) return std::nullopt;
  try {
    return parse_prefix(stack[0]);
  } catch (const ParseError&) {
    return std::nullopt;
  }
}

// Rewrites literal leaves as quantity references (first matching text
// occurrence) or known constants. nullopt when a literal maps to neither.
inline std::optional<ExprTree> bind_gold_literals(const ExprTree& literal_tree,
                                                  const std::vector<Quantity>& quantities) {
  ExprTree out = literal_tree;
  for (int i = 0; i < out.size(); ++i) {
    Token& t = out.tokens[i];
    if (t.kind != Token::Kind::Constant) continue;
    bool bound = false;
    for (size_t q = 0; q < quantities.size(); ++q) {
      if (value_close(quantities[q].value, t.con)) {
        t = Token::quantity(static_cast<int>(q));
        bound = true;
        break;
      }
    }
    if (bound) continue;
    if (t.con == 1.0 || t.con == 2.0) continue;
    if (value_close(t.con, kPi)) {
      t = Token::constant(kPi);
      continue;
    }
    return std::nullopt;  // literal absent from text and not a known constant
  }
  return out;
}

// ---- Math23K-format loading ------------------------------------------------

struct LoadStats {
  int total = 0;
  int loaded = 0;
  int malformed = 0;
  int unparsable_answer = 0;
  int gold_unbound = 0;  // equation kept as text only
};

inline std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

namespace detail {

inline bool record_to_problem(const nlohmann::json& rec, Problem& p, Split& split,
                              LoadStats& stats) {
  if (!rec.is_object() || !rec.contains("segmented_text") || !rec.contains("ans")) {
    ++stats.malformed;
    return false;
  }
  try {
    if (rec.contains("id"))
      p.id = rec["id"].is_string() ? rec["id"].get<std::string>()
                                   : std::to_string(rec["id"].get<long long>());
    p.words = split_whitespace(rec["segmented_text"].get<std::string>());
    std::string ans = rec["ans"].is_string() ? rec["ans"].get<std::string>()
                                             : nlohmann::json(rec["ans"]).dump();
    auto y = parse_numeric_token(ans);
    if (!y) {
      ++stats.unparsable_answer;
      return false;
    }
    p.answer = *y;
    p.quantities = extract_quantities(p.words);
    if (p.words.empty() || p.quantities.empty()) {
      ++stats.malformed;
      return false;
    }

    if (rec.contains("equation")) {
      std::string eq = rec["equation"].get<std::string>();
      if (auto lit = parse_infix_equation(eq)) {
        p.gold_size = lit->size();
        if (auto bound = bind_gold_literals(*lit, p.quantities))
          p.gold_prefix = to_prefix_string(*bound);
        else
          ++stats.gold_unbound;
      }
    }
    split = Split::Train;
    if (rec.contains("split") && rec["split"].is_string() && rec["split"] == "test")
      split = Split::Test;
    return true;
  } catch (const nlohmann::json::exception&) {
    ++stats.malformed;
    return false;
  }
}

}  // namespace detail

// Reads a Math23K-format file: either a JSON array of records or one JSON
// record per line. Records carry id, segmented_text, equation, ans.
inline Corpus load_math23k(const std::string& path, LoadStats* stats_out = nullptr) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset: " + path);
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Corpus corpus;
  corpus.provenance = "math23k";
  LoadStats stats;

  auto take = [&](const nlohmann::json& rec) {
    ++stats.total;
    Problem p;
    Split sp = Split::Train;
    if (detail::record_to_problem(rec, p, sp, stats)) {
      if (p.id.empty()) p.id = "p" + std::to_string(corpus.problems.size());
      corpus.problems.push_back(std::move(p));
      corpus.split.push_back(sp);
      ++stats.loaded;
    }
  };

  size_t first = content.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && content[first] == '[') {
    nlohmann::json arr = nlohmann::json::parse(content, nullptr, false);
    if (arr.is_discarded() || !arr.is_array()) throw std::runtime_error("bad JSON array: " + path);
    for (const auto& rec : arr) take(rec);
  } else {
    std::istringstream lines(content);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
      if (rec.is_discarded()) {
        ++stats.total;
        ++stats.malformed;
        continue;
      }
      take(rec);
    }
  }
  if (stats_out) *stats_out = stats;
  return corpus;
}

// ---- synthetic corpus ------------------------------------------------------

struct SlotRange {
  int lo = 1;
  int hi = 9;
};

// Text skeleton with {slot} markers plus a generating prefix expression
// over the slot letters.
struct SyntheticTemplate {
  std::string name;
  std::vector<std::string> words;  // "{a}" tokens are slots
  std::string gold_pattern;        // e.g. "* / a b + b c"
  std::map<char, SlotRange> slots;
};

inline std::vector<SyntheticTemplate> default_templates() {
  std::vector<SyntheticTemplate> t;
  t.push_back({"journey",
               split_whitespace("a car travels {a} km in {b} hours then goes on for {c} more "
                                "hours at the same speed . how many km in total ?"),
               "* / a b + b c",
               {{'a', {20, 99}}, {'b', {2, 9}}, {'c', {3, 12}}}});
  t.push_back({"shopping",
               split_whitespace("tom buys a bag for {a} yuan and {b} pens for {c} yuan each . "
                                "how much does he spend ?"),
               "+ a * b c",
               {{'a', {5, 60}}, {'b', {2, 9}}, {'c', {3, 15}}}});
  t.push_back({"boxes",
               split_whitespace("a factory made {a} toys , sold {b} of them and packed the rest "
                                "into {c} boxes evenly . how many toys per box ?"),
               "/ - a b c",
               {{'a', {40, 99}}, {'b', {10, 39}}, {'c', {2, 9}}}});
  t.push_back({"area",
               split_whitespace("a garden is {a} m long and {b} m wide . what is its area ?"),
               "* a b",
               {{'a', {3, 30}}, {'b', {2, 20}}}});
  t.push_back({"share",
               split_whitespace("{a} sweets are shared equally among {b} kids . how many sweets "
                                "does each kid get ?"),
               "/ a b",
               {{'a', {10, 99}}, {'b', {2, 9}}}});
  return t;
}

inline std::string format_number(double v) {
  if (v == std::floor(v) && std::fabs(v) < 1e15) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.0f", v);
    return buf;
  }
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

// Renders a gold tree as an infix equation string with literal values,
// so synthetic corpora serialize in the Math23K schema.
inline std::string render_infix(const ExprTree& tree, std::span<const double> qvals, int pos = 0) {
  const Token& t = tree.tokens[pos];
  if (!t.is_operator()) return format_number(token_value(t, qvals));
  std::string l = render_infix(tree, qvals, tree.left[pos]);
  std::string r = render_infix(tree, qvals, tree.right[pos]);
  return "(" + l + op_symbol(t.op) + r + ")";
}

inline Corpus gen_synthetic(int n_problems, const std::vector<SyntheticTemplate>& templates,
                            uint64_t seed, double test_fraction = 0.2) {
  if (templates.empty()) throw std::invalid_argument("no templates");
  Corpus corpus;
  corpus.provenance = "synthetic";
  std::mt19937_64 rng(seed);

  for (int i = 0; i < n_problems; ++i) {
    const SyntheticTemplate& tpl = templates[i % templates.size()];

    for (int attempt = 0; attempt < 100; ++attempt) {
      std::map<char, double> values;
      bool distinct = true;
      for (const auto& [slot, range] : tpl.slots) {
        int v = std::uniform_int_distribution<int>(range.lo, range.hi)(rng);
        for (const auto& [s2, v2] : values) distinct = distinct && v2 != v;
        values[slot] = v;
      }
      if (!distinct) continue;

      Problem p;
      p.id = "syn-" + std::to_string(i);
      std::vector<char> slot_order;
      for (const std::string& w : tpl.words) {
        if (w.size() == 3 && w[0] == '{' && w[2] == '}') {
          char slot = w[1];
          p.words.push_back(format_number(values.at(slot)));
          slot_order.push_back(slot);
        } else {
          p.words.push_back(w);
        }
      }
      p.quantities = extract_quantities(p.words);
      if (p.quantities.size() != slot_order.size()) continue;

      // gold pattern letters refer to slots; quantities index by text order
      std::vector<Token> gold_tokens;
      bool ok = true;
      for (const std::string& sym : split_whitespace(tpl.gold_pattern)) {
        if (sym.size() == 1 && sym[0] >= 'a' && sym[0] <= 'z' &&
            std::string("+-*/^").find(sym[0]) == std::string::npos) {
          auto it = std::find(slot_order.begin(), slot_order.end(), sym[0]);
          if (it == slot_order.end()) {
            ok = false;
            break;
          }
          gold_tokens.push_back(
              Token::quantity(static_cast<int>(it - slot_order.begin())));
        } else {
          gold_tokens.push_back(token_from_string(sym));
        }
      }
      if (!ok) continue;

      ExprTree gold = parse_prefix(gold_tokens);
      EvalResult res = evaluate(gold, p.quantity_values());
      if (!res.ok() || !std::isfinite(res.value)) continue;
      p.answer = res.value;
      p.gold_prefix = to_prefix_string(gold);
      p.gold_size = gold.size();
      corpus.problems.push_back(std::move(p));
      break;
    }
    if (static_cast<int>(corpus.problems.size()) != i + 1)
      throw std::runtime_error("template never produced a valid problem: " + tpl.name);
  }
  assign_split(corpus, test_fraction, seed ^ 0x9e3779b97f4a7c15ULL);
  return corpus;
}

// ---- corpus (de)serialization in the Math23K schema ------------------------

inline nlohmann::json corpus_to_json(const Corpus& corpus) {
  nlohmann::json arr = nlohmann::json::array();
  for (size_t i = 0; i < corpus.problems.size(); ++i) {
    const Problem& p = corpus.problems[i];
    nlohmann::json rec;
    rec["id"] = p.id;
    std::string text;
    for (size_t w = 0; w < p.words.size(); ++w) {
      if (w) text += ' ';
      text += p.words[w];
    }
    rec["segmented_text"] = text;
    rec["ans"] = format_number(p.answer);
    if (!p.gold_prefix.empty()) {
      ExprTree gold = parse_prefix_string(p.gold_prefix);
      rec["equation"] = "x=" + render_infix(gold, p.quantity_values());
    }
    rec["split"] = corpus.split[i] == Split::Test ? "test" : "train";
    arr.push_back(std::move(rec));
  }
  return arr;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write corpus: " + path);
  os << corpus_to_json(corpus).dump(1) << "\n";
}

// ---- brute-force solution oracle -------------------------------------------

// Every expression within the size range that executes to the problem's
// answer. Exhaustive; guarded against combinatorial blowups.
inline std::vector<ExprTree> oracle_solutions(const Problem& problem, int min_size, int max_size,
                                              const Vocab& vocab) {
  if (max_size > 9 || vocab.num_numerics() > 6) throw SizeTooLarge(max_size);
  std::vector<double> qvals = problem.quantity_values();
  std::vector<ExprTree> out;
  for (ExprTree& t : enumerate_trees(vocab, min_size, max_size)) {
    EvalResult r = evaluate(t, qvals);
    if (r.ok() && answers_match(r.value, problem.answer)) out.push_back(std::move(t));
  }
  return out;
}

}  // namespace treefix
