#pragma once

#include "hypograd/linalg.hpp"

#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace hypograd {

/// Value, gradient and Hessian of a scalar expression at one point.
struct Jet {
  double v = 0.0;
  Vec g;
  SMat h;
};

// Small arithmetic-expression language for drifts declared in config files:
//   numbers, variables, + - * / ^, unary minus, parentheses,
//   sin cos tan exp log sqrt tanh sinh cosh sech.
// Derivatives are propagated in forward mode (second order), so Jacobians and
// their directional derivatives are exact rather than differenced.
class Expression {
 public:
  struct Node;

  static Expression parse(std::string_view source, const std::vector<std::string>& variables);

  /// order 0: value only; 1: value + gradient; 2: value + gradient + Hessian.
  Jet eval(const Vec& x, int order) const;
  double value(const Vec& x) const;

  const std::string& source() const { return source_; }
  int arity() const { return arity_; }

 private:
  std::shared_ptr<const Node> root_;
  std::string source_;
  int arity_ = 0;
};

/// Variable names x1..xm, y1..yd used for drift and test-function expressions.
std::vector<std::string> state_variable_names(int m, int d);

}  // namespace hypograd
