#ifndef METRICSPLIT_EXPR_HPP
#define METRICSPLIT_EXPR_HPP

// Closed-form expression trees: parsing, exact symbolic differentiation and
// numeric evaluation. The grammar covers rational numbers, pi, coordinate
// names, + - * / ^ (integer exponents), sin and cos. Division is folded away
// at parse time and is only accepted by nonzero rational constants, so every
// tree evaluates to a finite value at every finite point.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace msplit::expr {

class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& what, std::size_t pos)
      : std::runtime_error(what + " (at position " + std::to_string(pos) + ")"),
        pos_(pos) {}
  std::size_t position() const { return pos_; }

private:
  std::size_t pos_;
};

class EvalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Exact rational with overflow-checked arithmetic. Operations that would
// overflow int64 report failure and the caller keeps the tree unfolded;
// evaluation then proceeds in doubles, which preserves semantics.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;  // always > 0 after normalize()

  static std::optional<Rational> make(std::int64_t n, std::int64_t d) {
    if (d == 0) return std::nullopt;
    Rational r{n, d};
    r.normalize();
    return r;
  }

  void normalize() {
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
    if (num == 0) den = 1;
  }

  bool is_zero() const { return num == 0; }
  bool is_one() const { return num == 1 && den == 1; }
  bool is_integer() const { return den == 1; }
  double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }

  static std::optional<Rational> add(Rational a, Rational b) {
    std::int64_t n1, n2, n, d;
    if (__builtin_mul_overflow(a.num, b.den, &n1)) return std::nullopt;
    if (__builtin_mul_overflow(b.num, a.den, &n2)) return std::nullopt;
    if (__builtin_add_overflow(n1, n2, &n)) return std::nullopt;
    if (__builtin_mul_overflow(a.den, b.den, &d)) return std::nullopt;
    return make(n, d);
  }

  static std::optional<Rational> mul(Rational a, Rational b) {
    std::int64_t n, d;
    if (__builtin_mul_overflow(a.num, b.num, &n)) return std::nullopt;
    if (__builtin_mul_overflow(a.den, b.den, &d)) return std::nullopt;
    return make(n, d);
  }

  std::optional<Rational> negated() const { return make(-num, den); }
  std::optional<Rational> reciprocal() const { return make(den, num); }

  std::optional<Rational> pow(std::int64_t k) const {
    Rational base = *this;
    if (k < 0) {
      auto r = reciprocal();
      if (!r) return std::nullopt;
      base = *r;
      k = -k;
    }
    Rational acc{1, 1};
    for (std::int64_t i = 0; i < k; ++i) {
      auto p = mul(acc, base);
      if (!p) return std::nullopt;
      acc = *p;
    }
    return acc;
  }

  bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
};

enum class Kind : std::uint8_t { Number, Pi, Var, Sum, Product, Power, Sin, Cos };

class Expr;
using ExprPtr = std::shared_ptr<const Expr>;

class Expr {
public:
  static ExprPtr number(Rational r) {
    auto e = std::make_shared<Expr>(Kind::Number);
    e->value_ = r;
    return e;
  }
  static ExprPtr integer(std::int64_t v) { return number(Rational{v, 1}); }
  static ExprPtr pi() { return std::make_shared<Expr>(Kind::Pi); }

  static ExprPtr variable(int index, std::string name) {
    auto e = std::make_shared<Expr>(Kind::Var);
    e->var_index_ = index;
    e->var_name_ = std::move(name);
    return e;
  }

  static ExprPtr sum(std::vector<ExprPtr> terms) {
    if (terms.empty()) return integer(0);
    if (terms.size() == 1) return terms.front();
    auto e = std::make_shared<Expr>(Kind::Sum);
    e->args_ = std::move(terms);
    return e;
  }

  static ExprPtr product(std::vector<ExprPtr> factors) {
    if (factors.empty()) return integer(1);
    if (factors.size() == 1) return factors.front();
    auto e = std::make_shared<Expr>(Kind::Product);
    e->args_ = std::move(factors);
    return e;
  }

  // Non-negative exponents only; negative powers exist just transiently in
  // the parser, where they must fold into a rational.
  static ExprPtr power(ExprPtr base, std::int64_t k) {
    if (k < 0) throw std::invalid_argument("Expr::power: negative exponent");
    auto e = std::make_shared<Expr>(Kind::Power);
    e->args_ = {std::move(base)};
    e->exponent_ = k;
    return e;
  }

  static ExprPtr sin(ExprPtr a) {
    auto e = std::make_shared<Expr>(Kind::Sin);
    e->args_ = {std::move(a)};
    return e;
  }
  static ExprPtr cos(ExprPtr a) {
    auto e = std::make_shared<Expr>(Kind::Cos);
    e->args_ = {std::move(a)};
    return e;
  }

  explicit Expr(Kind k) : kind_(k) {}

  Kind kind() const { return kind_; }
  const Rational& value() const { return value_; }
  int var_index() const { return var_index_; }
  const std::string& var_name() const { return var_name_; }
  std::span<const ExprPtr> args() const { return args_; }
  const ExprPtr& arg(std::size_t i) const { return args_[i]; }
  std::int64_t exponent() const { return exponent_; }

  double evaluate(std::span<const double> point) const {
    switch (kind_) {
      case Kind::Number:
        return value_.to_double();
      case Kind::Pi:
        return M_PI;
      case Kind::Var:
        if (var_index_ < 0 || static_cast<std::size_t>(var_index_) >= point.size())
          throw EvalError("unassigned variable '" + var_name_ + "'");
        return point[static_cast<std::size_t>(var_index_)];
      case Kind::Sum: {
        double s = 0.0;
        for (const auto& a : args_) s += a->evaluate(point);
        return s;
      }
      case Kind::Product: {
        double p = 1.0;
        for (const auto& a : args_) p *= a->evaluate(point);
        return p;
      }
      case Kind::Power: {
        double b = args_[0]->evaluate(point);
        double acc = 1.0;
        for (std::int64_t i = 0; i < exponent_; ++i) acc *= b;
        return acc;
      }
      case Kind::Sin:
        return std::sin(args_[0]->evaluate(point));
      case Kind::Cos:
        return std::cos(args_[0]->evaluate(point));
    }
    return 0.0;  // unreachable
  }

private:
  Kind kind_;
  Rational value_{};
  int var_index_ = -1;
  std::string var_name_;
  std::vector<ExprPtr> args_;
  std::int64_t exponent_ = 0;
};

inline bool structurally_equal(const ExprPtr& a, const ExprPtr& b) {
  if (a.get() == b.get()) return true;
  if (a->kind() != b->kind()) return false;
  switch (a->kind()) {
    case Kind::Number:
      return a->value() == b->value();
    case Kind::Pi:
      return true;
    case Kind::Var:
      return a->var_index() == b->var_index();
    case Kind::Power:
      if (a->exponent() != b->exponent()) return false;
      [[fallthrough]];
    default: {
      if (a->args().size() != b->args().size()) return false;
      for (std::size_t i = 0; i < a->args().size(); ++i)
        if (!structurally_equal(a->arg(i), b->arg(i))) return false;
      return true;
    }
  }
}

// Evaluates a tree to a rational if it contains neither variables nor pi.
inline std::optional<Rational> fold_constant(const ExprPtr& e) {
  switch (e->kind()) {
    case Kind::Number:
      return e->value();
    case Kind::Pi:
    case Kind::Var:
      return std::nullopt;
    case Kind::Sum: {
      Rational acc{0, 1};
      for (const auto& a : e->args()) {
        auto v = fold_constant(a);
        if (!v) return std::nullopt;
        auto s = Rational::add(acc, *v);
        if (!s) return std::nullopt;
        acc = *s;
      }
      return acc;
    }
    case Kind::Product: {
      Rational acc{1, 1};
      for (const auto& a : e->args()) {
        auto v = fold_constant(a);
        if (!v) return std::nullopt;
        auto p = Rational::mul(acc, *v);
        if (!p) return std::nullopt;
        acc = *p;
      }
      return acc;
    }
    case Kind::Power: {
      auto v = fold_constant(e->arg(0));
      if (!v) return std::nullopt;
      return v->pow(e->exponent());
    }
    case Kind::Sin:
    case Kind::Cos:
      return std::nullopt;
  }
  return std::nullopt;
}

// Constant folding, 0/1 identities and flattening of nested sums/products.
// Evaluation semantics are unchanged at every point; no trig rewriting.
inline ExprPtr simplify(const ExprPtr& e) {
  switch (e->kind()) {
    case Kind::Number:
    case Kind::Pi:
    case Kind::Var:
      return e;
    case Kind::Sum: {
      std::vector<ExprPtr> terms;
      Rational acc{0, 1};
      bool fold_ok = true;
      auto push = [&](const ExprPtr& t) {
        if (t->kind() == Kind::Number && fold_ok) {
          if (auto s = Rational::add(acc, t->value())) {
            acc = *s;
            return;
          }
          fold_ok = false;
        }
        terms.push_back(t);
      };
      for (const auto& a : e->args()) {
        auto s = simplify(a);
        if (s->kind() == Kind::Sum)
          for (const auto& t : s->args()) push(t);
        else
          push(s);
      }
      if (!acc.is_zero() || terms.empty())
        terms.insert(terms.begin(), Expr::number(acc));
      return Expr::sum(std::move(terms));
    }
    case Kind::Product: {
      std::vector<ExprPtr> factors;
      Rational acc{1, 1};
      bool fold_ok = true;
      auto push = [&](const ExprPtr& f) {
        if (f->kind() == Kind::Number && fold_ok) {
          if (auto p = Rational::mul(acc, f->value())) {
            acc = *p;
            return;
          }
          fold_ok = false;
        }
        factors.push_back(f);
      };
      for (const auto& a : e->args()) {
        auto s = simplify(a);
        if (s->kind() == Kind::Product)
          for (const auto& f : s->args()) push(f);
        else
          push(s);
      }
      if (fold_ok && acc.is_zero()) return Expr::integer(0);
      if (!acc.is_one() || factors.empty())
        factors.insert(factors.begin(), Expr::number(acc));
      return Expr::product(std::move(factors));
    }
    case Kind::Power: {
      auto base = simplify(e->arg(0));
      std::int64_t k = e->exponent();
      if (k == 0) return Expr::integer(1);
      if (k == 1) return base;
      if (base->kind() == Kind::Number)
        if (auto v = base->value().pow(k)) return Expr::number(*v);
      if (base->kind() == Kind::Power) {
        std::int64_t kk;
        if (!__builtin_mul_overflow(k, base->exponent(), &kk))
          return Expr::power(base->arg(0), kk);
      }
      return Expr::power(base, k);
    }
    case Kind::Sin: {
      auto a = simplify(e->arg(0));
      if (a->kind() == Kind::Number && a->value().is_zero()) return Expr::integer(0);
      return Expr::sin(a);
    }
    case Kind::Cos: {
      auto a = simplify(e->arg(0));
      if (a->kind() == Kind::Number && a->value().is_zero()) return Expr::integer(1);
      return Expr::cos(a);
    }
  }
  return e;
}

inline ExprPtr differentiate(const ExprPtr& e, int var_index) {
  struct D {
    int v;
    ExprPtr operator()(const ExprPtr& e) const {
      switch (e->kind()) {
        case Kind::Number:
        case Kind::Pi:
          return Expr::integer(0);
        case Kind::Var:
          return Expr::integer(e->var_index() == v ? 1 : 0);
        case Kind::Sum: {
          std::vector<ExprPtr> terms;
          terms.reserve(e->args().size());
          for (const auto& a : e->args()) terms.push_back((*this)(a));
          return Expr::sum(std::move(terms));
        }
        case Kind::Product: {
          std::vector<ExprPtr> terms;
          for (std::size_t i = 0; i < e->args().size(); ++i) {
            std::vector<ExprPtr> factors;
            factors.reserve(e->args().size());
            for (std::size_t j = 0; j < e->args().size(); ++j)
              factors.push_back(i == j ? (*this)(e->arg(j)) : e->arg(j));
            terms.push_back(Expr::product(std::move(factors)));
          }
          return Expr::sum(std::move(terms));
        }
        case Kind::Power: {
          const std::int64_t k = e->exponent();
          if (k == 0) return Expr::integer(0);
          return Expr::product(
              {Expr::integer(k), Expr::power(e->arg(0), k - 1), (*this)(e->arg(0))});
        }
        case Kind::Sin:
          return Expr::product({Expr::cos(e->arg(0)), (*this)(e->arg(0))});
        case Kind::Cos:
          return Expr::product(
              {Expr::integer(-1), Expr::sin(e->arg(0)), (*this)(e->arg(0))});
      }
      return Expr::integer(0);
    }
  };
  return simplify(D{var_index}(e));
}

namespace detail {

inline std::string rational_to_string(const Rational& r) {
  std::string s = std::to_string(r.num);
  if (!r.is_integer()) s += "/" + std::to_string(r.den);
  return s;
}

// Precedence levels: sum 1, product 2, power 3, atom 4.
inline int precedence(const Expr& e) {
  switch (e.kind()) {
    case Kind::Sum:
      return 1;
    case Kind::Product:
      return 2;
    case Kind::Power:
      return 3;
    case Kind::Number:
      return e.value().num < 0 ? 2 : 4;
    default:
      return 4;
  }
}

inline void print(const ExprPtr& e, int parent_prec, std::string& out);

// Splits a leading negative rational off a term so sums can print "a - b".
inline bool negative_head(const ExprPtr& e, ExprPtr& positive) {
  if (e->kind() == Kind::Number && e->value().num < 0) {
    positive = Expr::number(*e->value().negated());
    return true;
  }
  if (e->kind() == Kind::Product && !e->args().empty() &&
      e->arg(0)->kind() == Kind::Number && e->arg(0)->value().num < 0) {
    std::vector<ExprPtr> fs(e->args().begin(), e->args().end());
    auto head = *fs[0]->value().negated();
    if (head.is_one() && fs.size() >= 2)
      fs.erase(fs.begin());
    else
      fs[0] = Expr::number(head);
    positive = Expr::product(std::move(fs));
    return true;
  }
  return false;
}

inline void print(const ExprPtr& e, int parent_prec, std::string& out) {
  const int prec = precedence(*e);
  const bool parens = prec < parent_prec;
  if (parens) out += "(";
  switch (e->kind()) {
    case Kind::Number:
      out += rational_to_string(e->value());
      break;
    case Kind::Pi:
      out += "pi";
      break;
    case Kind::Var:
      out += e->var_name();
      break;
    case Kind::Sum:
      for (std::size_t i = 0; i < e->args().size(); ++i) {
        ExprPtr pos;
        if (i > 0 && negative_head(e->arg(i), pos)) {
          out += " - ";
          print(pos, 2, out);
        } else {
          if (i > 0) out += " + ";
          print(e->arg(i), 2, out);
        }
      }
      break;
    case Kind::Product:
      for (std::size_t i = 0; i < e->args().size(); ++i) {
        if (i > 0) out += "*";
        print(e->arg(i), 3, out);
      }
      break;
    case Kind::Power:
      print(e->arg(0), 4, out);
      out += "^" + std::to_string(e->exponent());
      break;
    case Kind::Sin:
      out += "sin(";
      print(e->arg(0), 0, out);
      out += ")";
      break;
    case Kind::Cos:
      out += "cos(";
      print(e->arg(0), 0, out);
      out += ")";
      break;
  }
  if (parens) out += ")";
}

}  // namespace detail

inline std::string to_string(const ExprPtr& e) {
  std::string out;
  detail::print(e, 0, out);
  return out;
}

namespace detail {

struct Token {
  enum class Type { Number, Ident, Op, LParen, RParen, End } type;
  std::string text;
  Rational value{};
  std::size_t pos = 0;
};

class Lexer {
public:
  explicit Lexer(const std::string& s) : s_(s) { advance(); }
  const Token& peek() const { return tok_; }
  Token next() {
    Token t = tok_;
    advance();
    return t;
  }

private:
  void advance() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
    tok_.pos = i_;
    if (i_ >= s_.size()) {
      tok_.type = Token::Type::End;
      tok_.text.clear();
      return;
    }
    const char c = s_[i_];
    if (std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t start = i_;
      while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) ++i_;
      std::int64_t num = 0, den = 1;
      bool overflow = false;
      for (std::size_t k = start; k < i_; ++k)
        overflow |= __builtin_mul_overflow(num, 10, &num) ||
                    __builtin_add_overflow(num, s_[k] - '0', &num);
      if (i_ < s_.size() && s_[i_] == '.') {
        ++i_;
        if (i_ >= s_.size() || !std::isdigit(static_cast<unsigned char>(s_[i_])))
          throw ParseError("malformed number", i_);
        while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) {
          overflow |= __builtin_mul_overflow(num, 10, &num) ||
                      __builtin_add_overflow(num, s_[i_] - '0', &num) ||
                      __builtin_mul_overflow(den, 10, &den);
          ++i_;
        }
      }
      if (overflow) throw ParseError("number literal out of range", start);
      tok_.type = Token::Type::Number;
      tok_.text = s_.substr(start, i_ - start);
      tok_.value = *Rational::make(num, den);
      return;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t start = i_;
      while (i_ < s_.size() &&
             (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_'))
        ++i_;
      tok_.type = Token::Type::Ident;
      tok_.text = s_.substr(start, i_ - start);
      return;
    }
    if (c == '(') {
      tok_.type = Token::Type::LParen;
    } else if (c == ')') {
      tok_.type = Token::Type::RParen;
    } else if (c == '+' || c == '-' || c == '*' || c == '/' || c == '^') {
      tok_.type = Token::Type::Op;
    } else {
      throw ParseError(std::string("unexpected character '") + c + "'", i_);
    }
    tok_.text = std::string(1, c);
    ++i_;
  }

  const std::string& s_;
  std::size_t i_ = 0;
  Token tok_;
};

class Parser {
public:
  Parser(const std::string& text, std::span<const std::string> coords)
      : lex_(text), coords_(coords) {}

  ExprPtr run() {
    auto e = parse_sum();
    if (lex_.peek().type != Token::Type::End)
      throw ParseError("unexpected trailing input", lex_.peek().pos);
    return e;
  }

private:
  ExprPtr parse_sum() {
    std::vector<ExprPtr> terms{parse_term()};
    while (is_op("+") || is_op("-")) {
      const bool minus = lex_.next().text == "-";
      auto t = parse_term();
      terms.push_back(minus ? negate(t) : t);
    }
    return terms.size() == 1 ? terms.front() : Expr::sum(std::move(terms));
  }

  ExprPtr parse_term() {
    std::vector<ExprPtr> factors{parse_unary()};
    while (is_op("*") || is_op("/")) {
      const Token op = lex_.next();
      auto f = parse_unary();
      if (op.text == "/") {
        auto c = fold_constant(f);
        if (!c)
          throw ParseError("division is only allowed by rational constants", op.pos);
        if (c->is_zero()) throw ParseError("division by zero", op.pos);
        f = Expr::number(*c->reciprocal());
      }
      factors.push_back(f);
    }
    return factors.size() == 1 ? factors.front() : Expr::product(std::move(factors));
  }

  ExprPtr parse_unary() {
    if (is_op("-")) {
      lex_.next();
      return negate(parse_unary());
    }
    if (is_op("+")) {
      lex_.next();
      return parse_unary();
    }
    return parse_power();
  }

  ExprPtr parse_power() {
    auto base = parse_atom();
    if (!is_op("^")) return base;
    const Token caret = lex_.next();
    bool neg = false;
    if (is_op("-")) {
      lex_.next();
      neg = true;
    }
    if (lex_.peek().type != Token::Type::Number)
      throw ParseError("exponent must be an integer", lex_.peek().pos);
    const Token t = lex_.next();
    if (!t.value.is_integer()) throw ParseError("non-integer exponent", t.pos);
    std::int64_t k = t.value.num * (neg ? -1 : 1);
    if (k < -64 || k > 64) throw ParseError("exponent out of range", t.pos);
    if (k < 0) {
      auto c = fold_constant(base);
      if (!c || c->is_zero())
        throw ParseError("negative exponent requires a nonzero constant base", caret.pos);
      return Expr::number(*c->pow(k));
    }
    return Expr::power(base, k);
  }

  ExprPtr parse_atom() {
    const Token t = lex_.next();
    switch (t.type) {
      case Token::Type::Number:
        return Expr::number(t.value);
      case Token::Type::LParen: {
        auto e = parse_sum();
        expect_rparen(t.pos);
        return e;
      }
      case Token::Type::Ident: {
        if (t.text == "pi") return Expr::pi();
        if (t.text == "sin" || t.text == "cos") {
          if (lex_.peek().type != Token::Type::LParen)
            throw ParseError("expected '(' after '" + t.text + "'", lex_.peek().pos);
          const Token lp = lex_.next();
          auto a = parse_sum();
          expect_rparen(lp.pos);
          return t.text == "sin" ? Expr::sin(a) : Expr::cos(a);
        }
        for (std::size_t i = 0; i < coords_.size(); ++i)
          if (coords_[i] == t.text)
            return Expr::variable(static_cast<int>(i), t.text);
        throw ParseError("unknown identifier '" + t.text + "'", t.pos);
      }
      default:
        throw ParseError("unexpected token '" + t.text + "'", t.pos);
    }
  }

  void expect_rparen(std::size_t open_pos) {
    if (lex_.peek().type != Token::Type::RParen)
      throw ParseError("unbalanced parenthesis", open_pos);
    lex_.next();
  }

  static ExprPtr negate(const ExprPtr& e) {
    if (e->kind() == Kind::Number)
      if (auto n = e->value().negated()) return Expr::number(*n);
    if (e->kind() == Kind::Product && !e->args().empty() &&
        e->arg(0)->kind() == Kind::Number) {
      if (auto n = e->arg(0)->value().negated()) {
        std::vector<ExprPtr> fs(e->args().begin(), e->args().end());
        fs[0] = Expr::number(*n);
        return Expr::product(std::move(fs));
      }
    }
    return Expr::product({Expr::integer(-1), e});
  }

  bool is_op(const char* s) const {
    return lex_.peek().type == Token::Type::Op && lex_.peek().text == s;
  }

  Lexer lex_;
  std::span<const std::string> coords_;
};

}  // namespace detail

inline ExprPtr parse(const std::string& text, std::span<const std::string> coords) {
  return detail::Parser(text, coords).run();
}

// Parses and evaluates a variable-free expression, e.g. a base point
// coordinate given as "pi/2".
inline double evaluate_constant_text(const std::string& text) {
  auto e = parse(text, {});
  return e->evaluate({});
}

}  // namespace msplit::expr

#endif  // METRICSPLIT_EXPR_HPP
