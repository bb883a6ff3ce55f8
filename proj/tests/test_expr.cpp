#include "hypograd/errors.hpp"
#include "hypograd/expr.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hypograd;

namespace {

Vec point(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

// Gradient and Hessian by central differences of the value.
void expect_derivatives_match(const Expression& e, const Vec& x) {
  const Jet j = e.eval(x, 2);
  const int n = static_cast<int>(x.size());
  const double h = 1e-4;
  for (int s = 0; s < n; ++s) {
    Vec p = x, q = x;
    p(s) += h;
    q(s) -= h;
    const double fd = (e.value(p) - e.value(q)) / (2 * h);
    EXPECT_NEAR(j.g(s), fd, 1e-6 * (1 + std::abs(fd))) << e.source() << " d/dx" << s;
    const Vec gp = e.eval(p, 1).g, gq = e.eval(q, 1).g;
    for (int r = 0; r < n; ++r) {
      const double fdh = (gp(r) - gq(r)) / (2 * h);
      EXPECT_NEAR(j.h(r, s), fdh, 1e-6 * (1 + std::abs(fdh))) << e.source();
    }
  }
}

}  // namespace

TEST(Expression, ArithmeticAndPrecedence) {
  const auto names = state_variable_names(1, 1);
  EXPECT_DOUBLE_EQ(Expression::parse("1 + 2 * 3", names).value(point({0, 0})), 7.0);
  EXPECT_DOUBLE_EQ(Expression::parse("(1 + 2) * 3", names).value(point({0, 0})), 9.0);
  EXPECT_DOUBLE_EQ(Expression::parse("-x1^2", names).value(point({3, 0})), -9.0);
  EXPECT_DOUBLE_EQ(Expression::parse("2^3^2", names).value(point({0, 0})), 512.0);
  EXPECT_DOUBLE_EQ(Expression::parse("x1 / y1 - 1", names).value(point({6, 3})), 1.0);
  EXPECT_DOUBLE_EQ(Expression::parse("1.5e1", names).value(point({0, 0})), 15.0);
}

TEST(Expression, VariableNames) {
  const auto names = state_variable_names(2, 1);
  ASSERT_EQ(names.size(), 3u);
  EXPECT_EQ(names[0], "x1");
  EXPECT_EQ(names[1], "x2");
  EXPECT_EQ(names[2], "y1");
}

TEST(Expression, ExactDerivativesOfPolynomial) {
  const auto names = state_variable_names(1, 1);
  const auto e = Expression::parse("x1^3 * y1 + 2*x1*y1^2", names);
  const Jet j = e.eval(point({2, 3}), 2);
  EXPECT_DOUBLE_EQ(j.v, 8 * 3 + 2 * 2 * 9);
  EXPECT_DOUBLE_EQ(j.g(0), 3 * 4 * 3 + 2 * 9);
  EXPECT_DOUBLE_EQ(j.g(1), 8 + 4 * 2 * 3);
  EXPECT_DOUBLE_EQ(j.h(0, 0), 6 * 2 * 3);
  EXPECT_DOUBLE_EQ(j.h(0, 1), 3 * 4 + 4 * 3);
  EXPECT_DOUBLE_EQ(j.h(1, 1), 4 * 2);
}

TEST(Expression, TranscendentalDerivativesMatchDifferences) {
  const auto names = state_variable_names(2, 1);
  const char* sources[] = {
      "sin(x1) * cos(y1)",  "exp(-x1^2 - 0.5*y1)", "log(2 + x2^2) * tanh(x1)",
      "sqrt(3 + x1*x2)",    "sech(x1) + cosh(y1) - sinh(x2)", "x1 ^ y1",
      "tan(0.3 * x2) / (1 + y1^2)", "(1 + tanh(x1)^2) * y1",
  };
  const Vec x = point({0.4, -0.7, 1.3});
  for (const char* s : sources) expect_derivatives_match(Expression::parse(s, names), x);
}

TEST(Expression, OrderZeroSkipsDerivatives) {
  const auto e = Expression::parse("x1*y1", state_variable_names(1, 1));
  const Jet j = e.eval(point({2, 5}), 0);
  EXPECT_DOUBLE_EQ(j.v, 10.0);
  EXPECT_EQ(j.g.size(), 0);
}

TEST(Expression, ErrorsAreConfigErrors) {
  const auto names = state_variable_names(1, 1);
  EXPECT_THROW(Expression::parse("x3 + 1", names), ConfigError);
  EXPECT_THROW(Expression::parse("foo(x1)", names), ConfigError);
  EXPECT_THROW(Expression::parse("(x1 + 1", names), ConfigError);
  EXPECT_THROW(Expression::parse("x1 +", names), ConfigError);
  EXPECT_THROW(Expression::parse("x1 y1", names), ConfigError);
  EXPECT_THROW(Expression::parse("x1 $ 2", names), ConfigError);
}
