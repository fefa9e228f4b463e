#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "attrface/gradcheck.hpp"
#include "attrface/rng.hpp"
#include "attrface/tensor.hpp"

using namespace attrface;
using TensorD = Tensor<double>;
using TapeD = Tape<double>;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -2, double hi = 2) {
  Rng r(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = r.uniform(lo, hi);
  return v;
}

// sum(op(p) * w) for a fixed random w, so every output coordinate matters.
double check_op(const std::function<TensorD(TapeD&, const std::vector<TensorD>&)>& op, std::vector<Parameter<double>>& params,
                std::uint64_t seed) {
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  auto f = [&](TapeD& tape) {
    std::vector<TensorD> in;
    for (auto& p : params) in.push_back(p.tensor);
    auto out = op(tape, in);
    const TensorD w(out.shape(), random_values(out.numel(), seed));
    return tape.sum(tape.mul(out, w));
  };
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  const auto report = finite_difference_check(f, ptrs, opt);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  return report.max_rel_error;
}

Parameter<double> param(const std::string& name, Shape shape, std::uint64_t seed, double lo = -2, double hi = 2) {
  const auto n = shape_numel(shape);
  return Parameter<double>(name, std::move(shape), random_values(n, seed, lo, hi));
}

}  // namespace

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_THROW(TensorD({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(TensorD({0}, {}), ShapeError);
  EXPECT_NO_THROW(TensorD({2, 3}, std::vector<double>(6)));
}

TEST(Ops, ReluDefinition) {
  TapeD tape;
  const auto y = tape.relu(TensorD({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Ops, L2NormalizeThreeFourFive) {
  TapeD tape;
  const auto y = tape.l2_normalize_rows(TensorD::matrix(1, 2, {3, 4}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(Ops, MatmulAgainstTripleLoop) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6}, b{7, 8, 9, 10, 11, 12};
  TapeD tape;
  const auto c = tape.matmul(TensorD::matrix(2, 3, a), TensorD::matrix(3, 2, b));
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 2 + j];
      EXPECT_EQ(c.at(i, j), s);
    }
  EXPECT_EQ(c.at(0, 0), 58);
  EXPECT_EQ(c.at(1, 1), 154);
}

TEST(Ops, ShapeMismatchNamesKindAndShapes) {
  TapeD tape;
  try {
    tape.matmul(TensorD::matrix(2, 3, std::vector<double>(6)), TensorD::matrix(2, 2, std::vector<double>(4)));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(tape.add(TensorD::matrix(2, 3, std::vector<double>(6)), TensorD::matrix(3, 2, std::vector<double>(6))),
               ShapeError);
  EXPECT_THROW(tape.slice(TensorD::matrix(2, 3, std::vector<double>(6)), 2, 4), ShapeError);
}

TEST(Ops, ApplyDispatchMatchesNamedOps) {
  TapeD tape;
  const TensorD x = TensorD::matrix(2, 2, {1, -2, 3, -4});
  const std::vector<TensorD> in{x};
  EXPECT_EQ(tape.apply(OpKind::relu, in).values()[1], 0.0);
  EXPECT_EQ(tape.apply(OpKind::scale, in, {2.5}).values()[2], 7.5);
  EXPECT_THROW(tape.apply(OpKind::matmul, in), ShapeError);
}

TEST(Grl, ForwardIdentity) {
  TapeD tape;
  const auto y = tape.grl(TensorD({2}, {1.5, -2.0}), 1.0);
  EXPECT_EQ(y[0], 1.5);
  EXPECT_EQ(y[1], -2.0);
}

TEST(Grl, BackwardScalesAndNegates) {
  TapeD tape;
  TensorD z({2}, {0.3, 0.7}, true);
  const TensorD up({2}, {1, -3});
  tape.backward(tape.sum(tape.mul(tape.grl(z, 2.0), up)));
  EXPECT_EQ(z.grad()[0], -2);
  EXPECT_EQ(z.grad()[1], 6);
}

TEST(Grl, ZeroLambdaBlocksGradient) {
  TapeD tape;
  TensorD z({2}, {0.3, 0.7}, true);
  tape.backward(tape.sum(tape.grl(z, 0.0)));
  EXPECT_EQ(z.grad()[0], 0.0);
  EXPECT_EQ(z.grad()[1], 0.0);
}

TEST(Grl, ExactReversalAtLambdaOne) {
  const auto zv = random_values(12, 3);
  const auto uv = random_values(12, 4, -1e3, 1e3);
  TensorD z1({3, 4}, zv, true), z2({3, 4}, zv, true);
  const TensorD up({3, 4}, uv);
  TapeD t1, t2;
  const auto fwd = t1.grl(z1, 1.0);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(fwd[i], zv[i]);
  t1.backward(t1.sum(t1.mul(fwd, up)));
  t2.backward(t2.sum(t2.mul(z2, up)));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(z1.grad()[i], -z2.grad()[i]);
}

TEST(Grl, Errors) {
  TapeD tape;
  EXPECT_THROW(tape.grl(TensorD({1}, {1.0}), -1.0), ConfigError);
  EXPECT_THROW(tape.grl(TensorD({1}, {std::nan("")}), 1.0), NumericError);
}

TEST(Backward, SumGivesOnes) {
  TapeD tape;
  TensorD p({3}, {1, 2, 3}, true);
  tape.backward(tape.sum(p));
  for (double g : p.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, MeanOfRelu) {
  TapeD tape;
  TensorD p({2}, {-1, 2}, true);
  tape.backward(tape.mean(tape.relu(p)));
  EXPECT_EQ(p.grad()[0], 0.0);
  EXPECT_EQ(p.grad()[1], 0.5);
}

TEST(Backward, AccumulatesOverReuse) {
  const auto v = random_values(6, 9);
  TensorD a({2, 3}, v, true), b({2, 3}, v, true);
  TapeD t1, t2;
  // x used three times versus the single-use rewrite 3 * x.
  auto x1 = t1.relu(a);
  t1.backward(t1.sum(t1.add(t1.add(t1.mul(x1, x1), x1), x1)));
  auto x2 = t2.relu(b);
  t2.backward(t2.sum(t2.add(t2.mul(x2, x2), t2.scale(x2, 2.0))));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.grad()[i], b.grad()[i], 1e-15);
}

TEST(Backward, Errors) {
  TapeD tape;
  TensorD p({2}, {1, 2}, true);
  EXPECT_THROW(tape.backward(tape.relu(p)), ShapeError);
  auto loss = tape.sum(p);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), Error);
  tape.reset();
  EXPECT_THROW(tape.backward(loss), Error);  // from the previous generation
  p.zero_grad();
  tape.backward(tape.sum(p));
  EXPECT_EQ(p.grad()[0], 1.0);
}

TEST(Backward, ParametersStayLeaves) {
  TapeD tape;
  Parameter<double> p("p", {2}, {1, 2});
  auto y = tape.scale(p.tensor, 2.0);
  EXPECT_TRUE(p.tensor.is_leaf());
  EXPECT_FALSE(y.is_leaf());
}

TEST(Backward, NoGradModeRecordsNothing) {
  TapeD tape;
  tape.set_grad_enabled(false);
  TensorD p({2}, {1, 2}, true);
  auto y = tape.sum(tape.relu(p));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, NodesInTopologicalOrder) {
  TapeD tape;
  TensorD p({2, 2}, {1, 2, 3, 4}, true);
  tape.sum(tape.relu(tape.matmul(p, tape.transpose(p))));
  for (std::size_t i = 0; i < tape.nodes().size(); ++i) {
    for (const auto& in : tape.nodes()[i].inputs) {
      if (!in.is_leaf()) {
        bool earlier = false;
        for (std::size_t j = 0; j < i; ++j) earlier |= tape.nodes()[j].output.same_storage(in);
        EXPECT_TRUE(earlier);
      }
    }
  }
}

TEST(Normalize, UnitRows) {
  TapeD tape;
  const auto x = TensorD({5, 7}, random_values(35, 21));
  const auto y = tape.l2_normalize_rows(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += y.at(r, c) * y.at(r, c);
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
  }
  const auto tiny = tape.l2_normalize_rows(TensorD::matrix(1, 2, {1e-6, 0}));
  EXPECT_NEAR(tiny[0], 1.0, 1e-12);
}

TEST(Normalize, NearZeroRowRejected) {
  TapeD tape;
  EXPECT_THROW(tape.l2_normalize_rows(TensorD::matrix(2, 2, {1, 1, 1e-7, 0})), NumericError);
}

TEST(LogSumExp, StableAtLargeMagnitude) {
  TapeD tape;
  const auto y = tape.log_sum_exp_rows(TensorD::matrix(1, 3, {1000, 1000, -1000}));
  EXPECT_NEAR(y[0], 1000 + std::log(2.0), 1e-12);
}

// Gradient of every documented operation against central differences.

TEST(GradCheck, Matmul) {
  std::vector<Parameter<double>> ps{param("a", {3, 4}, 1), param("b", {4, 2}, 2)};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.matmul(in[0], in[1]); }, ps, 3);
}

TEST(GradCheck, AddSameShapeAndBroadcast) {
  std::vector<Parameter<double>> same{param("a", {3, 4}, 1), param("b", {3, 4}, 2)};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.add(in[0], in[1]); }, same, 3);
  std::vector<Parameter<double>> row{param("a", {3, 4}, 4), param("b", {4}, 5)};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.add(in[0], in[1]); }, row, 6);
  std::vector<Parameter<double>> scalar{param("a", {3, 4}, 7), param("b", {1}, 8)};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.add(in[0], in[1]); }, scalar, 9);
}

TEST(GradCheck, Mul) {
  std::vector<Parameter<double>> ps{param("a", {3, 4}, 1), param("b", {3, 4}, 2)};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.mul(in[0], in[1]); }, ps, 3);
}

TEST(GradCheck, ReluAwayFromKink) {
  auto p = param("a", {4, 5}, 1);
  for (auto& v : p.tensor.mutable_values()) v = v >= 0 ? v + 0.1 : v - 0.1;
  std::vector<Parameter<double>> ps{p};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.relu(in[0]); }, ps, 2);
}

TEST(GradCheck, ScaleTransposeSliceConcat) {
  std::vector<Parameter<double>> ps{param("a", {3, 4}, 1), param("b", {3, 2}, 2)};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.scale(in[0], -1.7); }, ps, 3);
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.transpose(in[0]); }, ps, 4);
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.slice(in[0], 1, 3); }, ps, 5);
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.concat({in[0], in[1]}); }, ps, 6);
}

TEST(GradCheck, NormalizeLseSigmoid) {
  std::vector<Parameter<double>> ps{param("a", {3, 4}, 11)};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.l2_normalize_rows(in[0]); }, ps, 1);
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.log_sum_exp_rows(in[0]); }, ps, 2);
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.sigmoid(in[0]); }, ps, 3);
}

TEST(GradCheck, Reductions) {
  std::vector<Parameter<double>> ps{param("a", {3, 4}, 12)};
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.sum(in[0]); }, ps, 1);
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.sum_rows(in[0]); }, ps, 2);
  check_op([](TapeD& t, const std::vector<TensorD>& in) { return t.mean(in[0]); }, ps, 3);
}

TEST(GradCheck, BceWithLogits) {
  std::vector<Parameter<double>> ps{param("l", {3, 4}, 13)};
  const TensorD y({3, 4}, {1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1});
  const TensorD m({3, 4}, {1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1});
  check_op([&](TapeD& t, const std::vector<TensorD>& in) { return t.bce_with_logits(in[0], y, m); }, ps, 1);
}

TEST(GradCheck, RandomTwoLayerComposition) {
  std::vector<Parameter<double>> ps{param("w1", {5, 6}, 1), param("b1", {6}, 2), param("w2", {6, 3}, 3)};
  const TensorD x({4, 5}, random_values(20, 4));
  check_op(
      [&](TapeD& t, const std::vector<TensorD>& in) {
        auto h = t.relu(t.add(t.matmul(x, in[0]), in[1]));
        return t.log_sum_exp_rows(t.matmul(h, in[2]));
      },
      ps, 5);
}
