#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace treefix {

inline constexpr double kPi = 3.14159265358979323846;

enum class Op : uint8_t { Add, Sub, Mul, Div, Pow };

inline constexpr Op kAllOps[] = {Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Pow};

inline char op_symbol(Op op) {
  switch (op) {
    case Op::Add: return '+';
    case Op::Sub: return '-';
    case Op::Mul: return '*';
    case Op::Div: return '/';
    case Op::Pow: return '^';
  }
  return '?';
}

// One symbol of a problem's target vocabulary: an operator, a constant,
// or a reference to the i-th quantity mentioned in the problem text.
struct Token {
  enum class Kind : uint8_t { Operator, Constant, Quantity };

  Kind kind = Kind::Constant;
  Op op = Op::Add;      // Kind::Operator
  double con = 1.0;     // Kind::Constant
  int quant = 0;        // Kind::Quantity

  static Token make_op(Op o) {
    Token t;
    t.kind = Kind::Operator;
    t.op = o;
    return t;
  }
  static Token constant(double v) {
    Token t;
    t.kind = Kind::Constant;
    t.con = v;
    return t;
  }
  static Token quantity(int i) {
    Token t;
    t.kind = Kind::Quantity;
    t.quant = i;
    return t;
  }

  bool is_operator() const { return kind == Kind::Operator; }
  bool is_numeric() const { return kind != Kind::Operator; }

  friend bool operator==(const Token& a, const Token& b) {
    if (a.kind != b.kind) return false;
    switch (a.kind) {
      case Kind::Operator: return a.op == b.op;
      case Kind::Constant: return a.con == b.con;
      case Kind::Quantity: return a.quant == b.quant;
    }
    return false;
  }
  friend bool operator!=(const Token& a, const Token& b) { return !(a == b); }
};

inline std::string token_to_string(const Token& t) {
  switch (t.kind) {
    case Token::Kind::Operator: return std::string(1, op_symbol(t.op));
    case Token::Kind::Constant:
      if (t.con == 1.0) return "1";
      if (t.con == 2.0) return "2";
      if (t.con == kPi) return "pi";
      {
        std::ostringstream os;
        os << t.con;
        return os.str();
      }
    case Token::Kind::Quantity: return "n" + std::to_string(t.quant);
  }
  return "?";
}

class ParseError : public std::runtime_error {
 public:
  enum class Kind { Incomplete, TrailingTokens, BadSymbol };

  ParseError(Kind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline Token token_from_string(const std::string& s) {
  if (s == "+") return Token::make_op(Op::Add);
  if (s == "-") return Token::make_op(Op::Sub);
  if (s == "*") return Token::make_op(Op::Mul);
  if (s == "/") return Token::make_op(Op::Div);
  if (s == "^") return Token::make_op(Op::Pow);
  if (s == "1") return Token::constant(1.0);
  if (s == "2") return Token::constant(2.0);
  if (s == "pi") return Token::constant(kPi);
  if (s.size() >= 2 && s[0] == 'n') {
    bool digits = true;
    for (size_t i = 1; i < s.size(); ++i) digits = digits && std::isdigit(static_cast<unsigned char>(s[i]));
    if (digits) return Token::quantity(std::stoi(s.substr(1)));
  }
  throw ParseError(ParseError::Kind::BadSymbol, "unknown token: " + s);
}

// Binary solution tree stored as its preorder token sequence plus child
// indices. Internal positions hold operators; leaves hold constants or
// quantity references. size() is the token count, always odd.
struct ExprTree {
  std::vector<Token> tokens;
  std::vector<int> left;   // -1 for leaves
  std::vector<int> right;  // -1 for leaves

  int size() const { return static_cast<int>(tokens.size()); }
  bool is_leaf(int pos) const { return left[pos] < 0; }

  friend bool operator==(const ExprTree& a, const ExprTree& b) { return a.tokens == b.tokens; }
  friend bool operator!=(const ExprTree& a, const ExprTree& b) { return !(a == b); }
};

// Builds the unique tree whose preorder traversal equals `tokens`.
inline ExprTree parse_prefix(std::span<const Token> tokens) {
  if (tokens.empty())
    throw ParseError(ParseError::Kind::Incomplete, "empty token sequence");
  ExprTree t;
  const int n = static_cast<int>(tokens.size());
  t.tokens.assign(tokens.begin(), tokens.end());
  t.left.assign(n, -1);
  t.right.assign(n, -1);

  // parse(pos) consumes the subtree starting at pos, returns one past its end
  struct Rec {
    ExprTree& t;
    int n;
    int parse(int pos) {
      if (pos >= n)
        throw ParseError(ParseError::Kind::Incomplete, "operands missing");
      if (!t.tokens[pos].is_operator()) return pos + 1;
      t.left[pos] = pos + 1;
      int mid = parse(pos + 1);
      t.right[pos] = mid;
      return parse(mid);
    }
  } rec{t, n};

  int end = rec.parse(0);
  if (end != n)
    throw ParseError(ParseError::Kind::TrailingTokens,
                     "extra symbols after a complete expression");
  return t;
}

inline ExprTree parse_prefix(const std::vector<Token>& tokens) {
  return parse_prefix(std::span<const Token>(tokens));
}

inline std::vector<Token> to_prefix(const ExprTree& tree) { return tree.tokens; }

inline std::string to_prefix_string(const ExprTree& tree) {
  std::string out;
  for (int i = 0; i < tree.size(); ++i) {
    if (i) out += ' ';
    out += token_to_string(tree.tokens[i]);
  }
  return out;
}

inline ExprTree parse_prefix_string(const std::string& text) {
  std::istringstream is(text);
  std::vector<Token> toks;
  std::string w;
  while (is >> w) toks.push_back(token_from_string(w));
  return parse_prefix(toks);
}

enum class EvalError : uint8_t { None, DivisionByZero, DomainError, BadQuantityIndex };

struct EvalResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  EvalError error = EvalError::None;

  bool ok() const { return error == EvalError::None; }
  explicit operator bool() const { return ok(); }
};

// Applies one operator; errors mark an invalid candidate, not a bug.
inline EvalResult apply_op(Op op, double l, double r) {
  double v = 0.0;
  switch (op) {
    case Op::Add: v = l + r; break;
    case Op::Sub: v = l - r; break;
    case Op::Mul: v = l * r; break;
    case Op::Div:
      if (std::fabs(r) < 1e-12) return {0.0, EvalError::DivisionByZero};
      v = l / r;
      break;
    case Op::Pow:
      if (l < 0.0 && r != std::floor(r)) return {0.0, EvalError::DomainError};
      v = std::pow(l, r);
      break;
  }
  if (!std::isfinite(v)) return {v, EvalError::DomainError};
  return {v, EvalError::None};
}

inline double token_value(const Token& t, std::span<const double> quantity_values) {
  return t.kind == Token::Kind::Constant ? t.con : quantity_values[t.quant];
}

// Bottom-up evaluation. If `node_values` is non-null it receives the value
// at every position (the per-node intermediate results).
inline EvalResult evaluate(const ExprTree& tree, std::span<const double> quantity_values,
                           std::vector<double>* node_values = nullptr) {
  const int n = tree.size();
  std::vector<double> vals(n, 0.0);
  EvalError err = EvalError::None;

  // children precede nothing in preorder, so walk positions in reverse:
  // both subtrees of position i live at indices > i.
  for (int i = n - 1; i >= 0 && err == EvalError::None; --i) {
    const Token& t = tree.tokens[i];
    if (t.is_operator()) {
      EvalResult r = apply_op(t.op, vals[tree.left[i]], vals[tree.right[i]]);
      if (!r.ok()) {
        err = r.error;
        break;
      }
      vals[i] = r.value;
    } else {
      if (t.kind == Token::Kind::Quantity &&
          (t.quant < 0 || t.quant >= static_cast<int>(quantity_values.size())))
        return {0.0, EvalError::BadQuantityIndex};
      vals[i] = token_value(t, quantity_values);
    }
  }
  if (err != EvalError::None) return {0.0, err};
  if (node_values) *node_values = std::move(vals);
  return {node_values ? (*node_values)[0] : vals[0], EvalError::None};
}

// Answer equivalence: |predicted - target| <= 1e-4 * max(1, |target|).
inline bool answers_match(double predicted, double target) {
  if (!std::isfinite(predicted) || !std::isfinite(target)) return false;
  return std::fabs(predicted - target) <= 1e-4 * std::max(1.0, std::fabs(target));
}

// Tight value identity used when mapping values onto tokens.
inline bool value_close(double a, double b) {
  return std::fabs(a - b) <= 1e-6 * std::max(1.0, std::fabs(b));
}

// A quantity mentioned in the text: its numeric value and token position.
struct Quantity {
  double value = 0.0;
  int position = 0;
};

// One math word problem: tokenized text, the ordered quantity list, the
// ground-truth answer, and (optionally) a gold expression in prefix form.
struct Problem {
  std::string id;
  std::vector<std::string> words;
  std::vector<Quantity> quantities;
  double answer = 0.0;
  std::string gold_prefix;  // empty when absent
  int gold_size = 0;        // token count of the annotated expression, 0 when absent

  std::vector<double> quantity_values() const {
    std::vector<double> v;
    v.reserve(quantities.size());
    for (const auto& q : quantities) v.push_back(q.value);
    return v;
  }
};

// The target vocabulary of one problem: operators, constants, and quantity
// references, in a fixed order.
struct Vocab {
  std::vector<Token> tokens;

  static Vocab standard(int n_quantities) {
    Vocab v;
    for (Op op : kAllOps) v.tokens.push_back(Token::make_op(op));
    v.tokens.push_back(Token::constant(1.0));
    v.tokens.push_back(Token::constant(2.0));
    v.tokens.push_back(Token::constant(kPi));
    for (int i = 0; i < n_quantities; ++i) v.tokens.push_back(Token::quantity(i));
    return v;
  }

  static Vocab from_tokens(std::vector<Token> toks) {
    Vocab v;
    v.tokens = std::move(toks);
    return v;
  }

  int size() const { return static_cast<int>(tokens.size()); }
  bool is_operator(int i) const { return tokens[i].is_operator(); }

  int num_operators() const {
    int c = 0;
    for (const auto& t : tokens) c += t.is_operator();
    return c;
  }
  int num_numerics() const { return size() - num_operators(); }

  std::optional<int> index_of(const Token& t) const {
    for (int i = 0; i < size(); ++i)
      if (tokens[i] == t) return i;
    return std::nullopt;
  }

  std::optional<int> index_of_op(Op op) const { return index_of(Token::make_op(op)); }
};

}  // namespace treefix
