#include "hypograd/expr.hpp"

#include "hypograd/errors.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>

namespace hypograd {

struct Expression::Node {
  enum class Kind { Number, Variable, Neg, Add, Sub, Mul, Div, Pow, Call };
  Kind kind = Kind::Number;
  double number = 0.0;
  int var = -1;
  std::string func;
  std::shared_ptr<const Node> lhs, rhs;
};

namespace {

using NodePtr = std::shared_ptr<const Expression::Node>;
using Kind = Expression::Node::Kind;

struct Scalar3 {
  double f, d1, d2;
};

// f, f', f'' for the supported unary functions.
Scalar3 apply_function(const std::string& name, double u) {
  if (name == "sin") return {std::sin(u), std::cos(u), -std::sin(u)};
  if (name == "cos") return {std::cos(u), -std::sin(u), -std::cos(u)};
  if (name == "tan") {
    const double t = std::tan(u), s2 = 1.0 + t * t;
    return {t, s2, 2.0 * t * s2};
  }
  if (name == "exp") {
    const double e = std::exp(u);
    return {e, e, e};
  }
  if (name == "log") return {std::log(u), 1.0 / u, -1.0 / (u * u)};
  if (name == "sqrt") {
    const double s = std::sqrt(u);
    return {s, 0.5 / s, -0.25 / (s * u)};
  }
  if (name == "tanh") {
    const double t = std::tanh(u), s2 = 1.0 - t * t;
    return {t, s2, -2.0 * t * s2};
  }
  if (name == "sinh") return {std::sinh(u), std::cosh(u), std::sinh(u)};
  if (name == "cosh") return {std::cosh(u), std::sinh(u), std::cosh(u)};
  if (name == "sech") {
    const double s = 1.0 / std::cosh(u), t = std::tanh(u);
    return {s, -s * t, s * (t * t - s * s)};
  }
  throw ConfigError("unknown function '" + name + "'");
}

bool is_known_function(const std::string& name) {
  static const char* names[] = {"sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "sinh", "cosh", "sech"};
  for (const char* n : names)
    if (name == n) return true;
  return false;
}

class Parser {
 public:
  Parser(std::string_view src, const std::vector<std::string>& vars) : src_(src) {
    for (std::size_t i = 0; i < vars.size(); ++i) vars_[vars[i]] = static_cast<int>(i);
  }

  NodePtr parse() {
    NodePtr e = expression();
    skip_ws();
    if (pos_ != src_.size()) fail("unexpected trailing input");
    return e;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("expression '" + std::string(src_) + "': " + msg + " at offset " +
                      std::to_string(pos_));
  }

  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < src_.size() && src_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  static NodePtr make(Kind k, NodePtr l, NodePtr r = nullptr) {
    auto n = std::make_shared<Expression::Node>();
    n->kind = k;
    n->lhs = std::move(l);
    n->rhs = std::move(r);
    return n;
  }

  NodePtr expression() {
    NodePtr left = term();
    for (;;) {
      if (accept('+')) left = make(Kind::Add, left, term());
      else if (accept('-')) left = make(Kind::Sub, left, term());
      else return left;
    }
  }

  NodePtr term() {
    NodePtr left = unary();
    for (;;) {
      if (accept('*')) left = make(Kind::Mul, left, unary());
      else if (accept('/')) left = make(Kind::Div, left, unary());
      else return left;
    }
  }

  NodePtr unary() {
    if (accept('-')) return make(Kind::Neg, unary());
    if (accept('+')) return unary();
    return power();
  }

  NodePtr power() {
    NodePtr base = primary();
    if (accept('^')) return make(Kind::Pow, base, unary());
    return base;
  }

  NodePtr primary() {
    skip_ws();
    if (pos_ >= src_.size()) fail("unexpected end of input");
    const char c = src_[pos_];
    if (c == '(') {
      ++pos_;
      NodePtr e = expression();
      if (!accept(')')) fail("expected ')'");
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      const std::string rest(src_.substr(pos_));
      char* end = nullptr;
      const double v = std::strtod(rest.c_str(), &end);
      if (end == rest.c_str()) fail("bad number");
      pos_ += static_cast<std::size_t>(end - rest.c_str());
      auto n = std::make_shared<Expression::Node>();
      n->kind = Kind::Number;
      n->number = v;
      return n;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t start = pos_;
      while (pos_ < src_.size() &&
             (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
        ++pos_;
      const std::string ident(src_.substr(start, pos_ - start));
      if (accept('(')) {
        if (!is_known_function(ident)) fail("unknown function '" + ident + "'");
        auto n = std::make_shared<Expression::Node>();
        n->kind = Kind::Call;
        n->func = ident;
        n->lhs = expression();
        if (!accept(')')) fail("expected ')'");
        return n;
      }
      if (ident == "pi") {
        auto n = std::make_shared<Expression::Node>();
        n->number = M_PI;
        return n;
      }
      auto it = vars_.find(ident);
      if (it == vars_.end()) fail("unknown variable '" + ident + "'");
      auto n = std::make_shared<Expression::Node>();
      n->kind = Kind::Variable;
      n->var = it->second;
      return n;
    }
    fail(std::string("unexpected character '") + c + "'");
  }

  std::string_view src_;
  std::size_t pos_ = 0;
  std::map<std::string, int> vars_;
};

Jet constant(double v, int n, int order) {
  Jet j;
  j.v = v;
  if (order >= 1) j.g = Vec::Zero(n);
  if (order >= 2) j.h = SMat::Zero(n, n);
  return j;
}

Jet chain(const Jet& u, Scalar3 s, int order) {
  Jet out;
  out.v = s.f;
  if (order >= 1) out.g = s.d1 * u.g;
  if (order >= 2) out.h = s.d1 * u.h + s.d2 * (u.g * u.g.transpose());
  return out;
}

Jet multiply(const Jet& a, const Jet& b, int order) {
  Jet out;
  out.v = a.v * b.v;
  if (order >= 1) out.g = a.g * b.v + a.v * b.g;
  if (order >= 2)
    out.h = a.h * b.v + a.v * b.h + a.g * b.g.transpose() + b.g * a.g.transpose();
  return out;
}

Jet evaluate(const Expression::Node& n, const Vec& x, int order) {
  const int dim = static_cast<int>(x.size());
  switch (n.kind) {
    case Kind::Number:
      return constant(n.number, dim, order);
    case Kind::Variable: {
      Jet j = constant(x(n.var), dim, order);
      if (order >= 1) j.g(n.var) = 1.0;
      return j;
    }
    case Kind::Neg: {
      Jet j = evaluate(*n.lhs, x, order);
      j.v = -j.v;
      if (order >= 1) j.g = -j.g;
      if (order >= 2) j.h = -j.h;
      return j;
    }
    case Kind::Add:
    case Kind::Sub: {
      Jet a = evaluate(*n.lhs, x, order);
      const Jet b = evaluate(*n.rhs, x, order);
      const double sgn = n.kind == Kind::Add ? 1.0 : -1.0;
      a.v += sgn * b.v;
      if (order >= 1) a.g += sgn * b.g;
      if (order >= 2) a.h += sgn * b.h;
      return a;
    }
    case Kind::Mul:
      return multiply(evaluate(*n.lhs, x, order), evaluate(*n.rhs, x, order), order);
    case Kind::Div: {
      const Jet b = evaluate(*n.rhs, x, order);
      const double inv = 1.0 / b.v;
      const Jet binv = chain(b, {inv, -inv * inv, 2.0 * inv * inv * inv}, order);
      return multiply(evaluate(*n.lhs, x, order), binv, order);
    }
    case Kind::Pow: {
      const Jet a = evaluate(*n.lhs, x, order);
      if (n.rhs->kind == Kind::Number ||
          (n.rhs->kind == Kind::Neg && n.rhs->lhs->kind == Kind::Number)) {
        const double c = n.rhs->kind == Kind::Number ? n.rhs->number : -n.rhs->lhs->number;
        const double u = a.v;
        return chain(a, {std::pow(u, c), c * std::pow(u, c - 1.0), c * (c - 1.0) * std::pow(u, c - 2.0)},
                     order);
      }
      // General power: exp(b log a).
      const Jet b = evaluate(*n.rhs, x, order);
      const Jet la = chain(a, apply_function("log", a.v), order);
      const Jet prod = multiply(b, la, order);
      return chain(prod, apply_function("exp", prod.v), order);
    }
    case Kind::Call: {
      const Jet u = evaluate(*n.lhs, x, order);
      return chain(u, apply_function(n.func, u.v), order);
    }
  }
  return constant(0.0, dim, order);
}

}  // namespace

Expression Expression::parse(std::string_view source, const std::vector<std::string>& variables) {
  if (variables.size() > static_cast<std::size_t>(kMaxState))
    throw ConfigError("too many expression variables");
  Expression e;
  e.root_ = Parser(source, variables).parse();
  e.source_ = std::string(source);
  e.arity_ = static_cast<int>(variables.size());
  return e;
}

Jet Expression::eval(const Vec& x, int order) const {
  if (x.size() != arity_) throw ConfigError("expression arity mismatch");
  return evaluate(*root_, x, order);
}

double Expression::value(const Vec& x) const { return eval(x, 0).v; }

std::vector<std::string> state_variable_names(int m, int d) {
  std::vector<std::string> names;
  for (int i = 1; i <= m; ++i) names.push_back("x" + std::to_string(i));
  for (int i = 1; i <= d; ++i) names.push_back("y" + std::to_string(i));
  return names;
}

}  // namespace hypograd
