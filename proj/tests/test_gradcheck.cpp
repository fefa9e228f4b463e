#include <gtest/gtest.h>

#include "attrface/gradcheck.hpp"

using namespace attrface;
using TensorD = Tensor<double>;
using TapeD = Tape<double>;

TEST(FiniteDifference, QuadraticIsExact) {
  Parameter<double> p("p", {2}, {1, 2});
  auto f = [&](TapeD& t) { return t.sum(t.mul(p.tensor, p.tensor)); };
  const auto report = finite_difference_check(f, {&p}, 1e-5, 1e-9);
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.max_rel_error, 1e-9);
  ASSERT_EQ(report.params.size(), 1u);
  EXPECT_EQ(report.params[0].coords_checked, 2u);
  EXPECT_EQ(p.tensor.grad()[0], 2.0);
  EXPECT_EQ(p.tensor.grad()[1], 4.0);
}

TEST(FiniteDifference, DetectsWrongGradient) {
  Parameter<double> p("p", {3}, {0.5, -1, 2});
  // grl flips the analytic gradient but not the forward value.
  auto f = [&](TapeD& t) { return t.sum(t.mul(t.grl(p.tensor, 1.0), p.tensor)); };
  EXPECT_FALSE(finite_difference_check(f, {&p}, 1e-5, 1e-6).passed);
}

TEST(FiniteDifference, SignAwareReversal) {
  Parameter<double> p("p", {3}, {0.5, -1, 2});
  const TensorD w({3}, {1.5, -0.5, 2});
  auto plain = [&](TapeD& t) { return t.sum(t.mul(t.mul(p.tensor, p.tensor), w)); };
  auto reversed = [&](TapeD& t) { return t.sum(t.mul(t.grl(t.mul(p.tensor, p.tensor), 1.0), w)); };
  GradCheckOptions opt;
  opt.sign = -1.0;
  const auto report = finite_difference_check(reversed, {&p}, opt);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  opt.sign = 1.0;
  opt.reference = plain;
  EXPECT_FALSE(finite_difference_check(reversed, {&p}, opt).passed);
}

TEST(FiniteDifference, RejectsNonDeterministicFunction) {
  Parameter<double> p("p", {1}, {1});
  int calls = 0;
  auto f = [&](TapeD& t) { return t.scale(p.tensor, static_cast<double>(++calls)); };
  EXPECT_THROW(finite_difference_check(f, {&p}, 1e-5, 1e-6), Error);
}

TEST(FiniteDifference, RejectsNonPositiveStep) {
  Parameter<double> p("p", {1}, {1});
  auto f = [&](TapeD& t) { return t.sum(p.tensor); };
  EXPECT_THROW(finite_difference_check(f, {&p}, 0.0, 1e-6), ConfigError);
}

TEST(FiniteDifference, SamplesLargeParameters) {
  Parameter<double> p("p", {200}, std::vector<double>(200, 0.25));
  auto f = [&](TapeD& t) { return t.sum(t.mul(p.tensor, p.tensor)); };
  GradCheckOptions opt;
  opt.max_coords_per_param = 10;
  const auto report = finite_difference_check(f, {&p}, opt);
  EXPECT_EQ(report.params[0].coords_checked, 10u);
  EXPECT_TRUE(report.passed);
}
