#include "hypograd/errors.hpp"
#include "hypograd/model.hpp"

#include <gtest/gtest.h>

using namespace hypograd;
using nlohmann::json;

namespace {

const ValidationCheck& check_named(const ValidationReport& r, const std::string& name) {
  for (const auto& c : r.checks)
    if (c.name == name) return c;
  throw std::runtime_error("no check named " + name);
}

ModelSpec hamiltonian_with(json p) { return builtin_model_with_defaults("hamiltonian", p); }

}  // namespace

TEST(Builtins, KineticOuDriftMatrix) {
  const ModelSpec s = builtin_model("kinetic_ou", {{"dim", 1}, {"K", 1.0}, {"Gamma", 1.0}, {"sigma", 1.0}});
  ASSERT_EQ(s.m, 1);
  ASSERT_EQ(s.d, 1);
  ASSERT_TRUE(s.linear());
  Eigen::Matrix2d expected;
  expected << 0, 1, -1, -1;
  EXPECT_TRUE(Eigen::MatrixXd(*s.linear_g).isApprox(Eigen::MatrixXd(expected), 0.0));
  const Vec x = Vec::Constant(2, 0.3);
  EXPECT_TRUE(Eigen::MatrixXd(s.jacobian(x)).isApprox(Eigen::MatrixXd(expected), 0.0));
  EXPECT_TRUE(s.adapted());
}

TEST(Builtins, HamiltonianWithUnitMassAndNoPotentialIsFreeMotion) {
  const ModelSpec s = hamiltonian_with({{"k2", 0.0}, {"c4", 0.0}, {"mass1", 0.0}, {"friction", 0.0}});
  Vec z(2);
  z << 0.7, -1.9;
  EXPECT_DOUBLE_EQ(s.z1(z)(0), -1.9);
  EXPECT_DOUBLE_EQ(s.z2(z)(0), 0.0);
}

TEST(Builtins, ChainPresetShape) {
  const ModelSpec s = builtin_model("integrator_chain", chain_preset(1));
  ASSERT_EQ(s.m, 2);
  ASSERT_EQ(s.d, 1);
  ASSERT_TRUE(s.const_a1.has_value());
  EXPECT_DOUBLE_EQ((*s.const_a1)(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(s.b0(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(s.b0(0, 0), 0.0);
}

TEST(Builtins, StrictParameterHandling) {
  EXPECT_THROW(builtin_model("kinetic_ou", {{"dim", 1}, {"K", 1.0}, {"Gamma", 1.0}}), ConfigError);
  EXPECT_THROW(builtin_model("kinetic_ou",
                             {{"dim", 1}, {"K", 1.0}, {"Gamma", 1.0}, {"sigma", 1.0}, {"extra", 1}}),
               ConfigError);
  EXPECT_THROW(builtin_model_with_defaults("kinetic_ou", {{"dim", 2}, {"K", json::array({json::array({1.0})})}}),
               ConfigError);
  EXPECT_THROW(builtin_model_with_defaults("no_such_model", json::object()), ConfigError);
  EXPECT_THROW(builtin_model_with_defaults("kinetic_ou", {{"sigma", 0.0}}), ModelError);
  EXPECT_THROW(builtin_model_with_defaults("hamiltonian", {{"mass0", 0.0}}), ConfigError);
}

TEST(Builtins, ListingIsSortedAndComplete) {
  const auto& l = list_builtins();
  ASSERT_EQ(l.size(), 3u);
  EXPECT_EQ(l[0].name, "hamiltonian");
  EXPECT_EQ(l[1].name, "integrator_chain");
  EXPECT_EQ(l[2].name, "kinetic_ou");
  for (const auto& b : l) {
    EXPECT_FALSE(b.required.empty());
    for (const auto& k : b.required) EXPECT_TRUE(b.defaults.contains(k)) << b.name << "." << k;
    EXPECT_NO_THROW(builtin_model(b.name, b.defaults));
  }
}

TEST(Validation, EveryBuiltinPassesOnUnitBox) {
  std::vector<ModelSpec> specs;
  for (const auto& b : list_builtins()) specs.push_back(builtin_model(b.name, b.defaults));
  specs.push_back(hamiltonian_with({{"mass1", 0.5}, {"friction", 0.3}, {"dim", 2}}));
  specs.push_back(builtin_model("integrator_chain", chain_preset(2)));
  for (const auto& s : specs) {
    const auto rep = validate_model(s, SampleBox::centered(s.dim(), 1.0), 64, 1);
    for (const auto& c : rep.checks) EXPECT_TRUE(c.pass) << s.name << ": " << c.name << " margin " << c.margin;
    EXPECT_TRUE(rep.overall);
  }
}

TEST(Validation, ConstantSplitHasZeroDominationMargin) {
  const ModelSpec s = builtin_model("kinetic_ou", list_builtins()[2].defaults);
  const auto rep = validate_model(s, SampleBox::centered(2, 1.0), 32, 3);
  EXPECT_EQ(check_named(rep, "domination").margin, 0.0);
}

TEST(Validation, MassMatrixDominatesItsLowerBound) {
  const ModelSpec s = hamiltonian_with({{"mass1", 2.0}});
  const auto rep = validate_model(s, SampleBox::centered(2, 2.0), 128, 5);
  const auto& c = check_named(rep, "domination");
  EXPECT_TRUE(c.pass);
  EXPECT_GE(c.margin, 0.0);
}

TEST(Validation, NegativeSplitFailsDomination) {
  ExpressionModelDecl decl;
  decl.m = 1;
  decl.d = 1;
  decl.z1 = {"-y1"};
  decl.z2 = {"-x1"};
  decl.sigma = Eigen::MatrixXd::Identity(1, 1);
  decl.b0 = Eigen::MatrixXd::Constant(1, 1, 1.0);
  decl.epsilon = 0.5;
  const ModelSpec s = expression_model(decl);
  const auto rep = validate_model(s, SampleBox::centered(2, 1.0), 16, 2);
  const auto& c = check_named(rep, "domination");
  EXPECT_FALSE(c.pass);
  EXPECT_FALSE(rep.overall);
  // ⟨B B₀ a, a⟩ = −2 for unit a; the reported slack adds ε|B₀ a|² = 0.5.
  EXPECT_NEAR(c.margin, -1.5, 1e-12);
}

TEST(Validation, SplitIdentityIsExact) {
  const ModelSpec s = hamiltonian_with({{"mass1", 0.7}});
  for (int k = 1; k <= 20; ++k) {
    const Vec x = 4.0 * halton_point(static_cast<std::uint64_t>(k), 2) - Vec::Constant(2, 2.0);
    EXPECT_EQ(Eigen::MatrixXd(s.split_b(x) + s.b0), Eigen::MatrixXd(s.jac_z1(x).c));
  }
}

TEST(Validation, ExpressionModelHessianMatchesBuiltin) {
  ExpressionModelDecl decl;
  decl.m = 1;
  decl.d = 1;
  decl.z1 = {"(1 + 0.5*tanh(x1)^2) * y1"};
  decl.z2 = {"-(x1 + 0.4*x1^3) - 0.5*0.5*2*tanh(x1)*sech(x1)^2*y1^2"};
  decl.sigma = Eigen::MatrixXd::Identity(1, 1);
  decl.b0 = Eigen::MatrixXd::Identity(1, 1);
  const ModelSpec e = expression_model(decl);
  const ModelSpec h = hamiltonian_with({{"mass1", 0.5}});
  for (int k = 1; k <= 10; ++k) {
    const Vec x = 2.0 * halton_point(static_cast<std::uint64_t>(k), 2) - Vec::Ones(2);
    EXPECT_NEAR((e.drift(x) - h.drift(x)).norm(), 0.0, 1e-12);
    EXPECT_NEAR((e.jacobian(x) - h.jacobian(x)).norm(), 0.0, 1e-12);
    const auto he = e.hess_z1(x), hh = h.hess_z1(x);
    EXPECT_NEAR((he.h[0] - hh.h[0]).norm(), 0.0, 1e-12);
  }
  const auto rep = validate_model(e, SampleBox::centered(2, 1.0), 32, 4);
  EXPECT_TRUE(rep.overall);
}

TEST(Validation, AdaptedAssertionIsChecked) {
  ExpressionModelDecl decl;
  decl.m = 1;
  decl.d = 1;
  decl.z1 = {"x1*y1"};
  decl.z2 = {"0"};
  decl.sigma = Eigen::MatrixXd::Identity(1, 1);
  decl.b0 = Eigen::MatrixXd::Identity(1, 1);
  decl.adapted = true;
  const auto rep = validate_model(expression_model(decl), SampleBox::centered(2, 1.0), 16, 4);
  EXPECT_FALSE(check_named(rep, "adapted_structure").pass);
}

TEST(Validation, BadInputs) {
  const ModelSpec s = builtin_model("kinetic_ou", list_builtins()[2].defaults);
  EXPECT_THROW(validate_model(s, SampleBox::centered(3, 1.0), 4, 1), ConfigError);
  EXPECT_THROW(validate_model(s, SampleBox::centered(2, 0.0), 4, 1), ConfigError);
  EXPECT_THROW(validate_model(s, SampleBox::centered(2, 1.0), 0, 1), ConfigError);
}
