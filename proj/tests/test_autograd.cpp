#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "ecdlm/autograd.h"
#include "ecdlm/error.h"
#include "ecdlm/rng.h"

using namespace ecdlm;
using namespace ecdlm::ad;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

using Graph = std::function<Var(Tape&, const std::vector<Var>&)>;

// Reduces the graph output to a scalar with fixed random weights, then
// compares every parameter gradient with central differences.
double max_gradient_error(std::vector<Parameter>& params, const Graph& graph, std::uint64_t seed = 1) {
  Rng rng(seed);
  Matrix weights;
  auto evaluate = [&](bool backward) {
    Tape t;
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(t.parameter(p));
    const Var out = graph(t, vars);
    if (weights.size() == 0) weights = random_matrix(rng, t.value(out).rows(), t.value(out).cols());
    const Var loss = dot_constant(t, out, weights);
    if (backward) t.backward(loss);
    return t.scalar(loss);
  };
  for (auto& p : params) p.zero_grad();
  evaluate(true);
  double worst = 0.0;
  const double h = 1e-6;
  for (auto& p : params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double saved = p.value.data()[i];
      p.value.data()[i] = saved + h;
      const double up = evaluate(false);
      p.value.data()[i] = saved - h;
      const double down = evaluate(false);
      p.value.data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad.data()[i];
      worst = std::max(worst, std::abs(numeric - analytic) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

constexpr double kTol = 1e-7;

}  // namespace

TEST(Autograd, Matmul) {
  Rng rng(1);
  std::vector<Parameter> p{{"a", random_matrix(rng, 3, 4)}, {"b", random_matrix(rng, 4, 2)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) { return matmul(t, v[0], v[1]); }), kTol);
}

TEST(Autograd, AddScaleMul) {
  Rng rng(2);
  std::vector<Parameter> p{{"a", random_matrix(rng, 3, 3)}, {"b", random_matrix(rng, 3, 3)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) {
              return mul(t, add(t, v[0], scale(t, v[1], -2.5)), v[0]);
            }),
            kTol);
}

TEST(Autograd, AddRequiresMatchingShapes) {
  Tape t;
  EXPECT_THROW(add(t, t.constant(Matrix::Ones(4, 3)), t.constant(Matrix::Ones(1, 3))), Error);
}

TEST(Autograd, Silu) {
  Rng rng(4);
  std::vector<Parameter> p{{"x", random_matrix(rng, 5, 3, 2.0)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) { return silu(t, v[0]); }), kTol);
}

TEST(Autograd, GatherAndScatterRows) {
  Rng rng(5);
  std::vector<Parameter> p{{"table", random_matrix(rng, 5, 3)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) {
              const Var g = gather_rows(t, v[0], {4, 0, 4, 2});
              return scatter_rows(t, silu(t, g), {1, 1, 0, 3}, 4);
            }),
            kTol);
}

TEST(Autograd, ScatterAccumulatesDuplicates) {
  Tape t;
  const Var src = t.constant((Matrix(2, 1) << 1.5, 2.0).finished());
  const Var out = scatter_rows(t, src, {1, 1}, 3);
  EXPECT_EQ(t.value(out)(1, 0), 3.5);
  EXPECT_EQ(t.value(out)(0, 0), 0.0);
}

TEST(Autograd, RowScale) {
  Rng rng(6);
  std::vector<Parameter> p{{"x", random_matrix(rng, 4, 3)}, {"w", random_matrix(rng, 4, 1)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) { return row_scale(t, v[0], v[1]); }), kTol);
}

TEST(Autograd, LayerNorm) {
  Rng rng(7);
  std::vector<Parameter> p{{"x", random_matrix(rng, 4, 6)},
                           {"g", random_matrix(rng, 1, 6)},
                           {"b", random_matrix(rng, 1, 6)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) { return layer_norm(t, v[0], v[1], v[2]); }),
            kTol);
}

TEST(Autograd, LayerNormForwardMatchesDefinition) {
  Tape t;
  const Var x = t.constant((Matrix(1, 4) << 1, 2, 3, 6).finished());
  const Var g = t.constant(Matrix::Ones(1, 4));
  const Var b = t.constant(Matrix::Zero(1, 4));
  const Matrix y = t.value(layer_norm(t, x, g, b, 0.0));
  // mean 3, variance (4+1+0+9)/4 = 3.5
  EXPECT_NEAR(y(0, 0), -2.0 / std::sqrt(3.5), 1e-12);
  EXPECT_NEAR(y(0, 3), 3.0 / std::sqrt(3.5), 1e-12);
}

TEST(Autograd, RowSoftmax) {
  Rng rng(8);
  std::vector<Parameter> p{{"x", random_matrix(rng, 3, 5)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) { return row_softmax(t, v[0]); }), kTol);
}

TEST(Autograd, GatherElementsAndSegmentSoftmax) {
  Rng rng(9);
  std::vector<Parameter> p{{"x", random_matrix(rng, 3, 4)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) {
              const Var g = gather_elements(t, v[0], {{0, 1}, {0, 3}, {1, 0}, {2, 2}, {2, 0}, {2, 1}});
              return segment_softmax(t, g, {0, 2, 3, 6});
            }),
            kTol);
}

TEST(Autograd, SegmentSoftmaxValues) {
  Tape t;
  const Var x = t.constant((Matrix(3, 1) << 0.0, std::log(3.0), 5.0).finished());
  const Matrix p = t.value(segment_softmax(t, x, {0, 2, 3}));
  EXPECT_NEAR(p(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(p(1, 0), 0.75, 1e-15);
  EXPECT_DOUBLE_EQ(p(2, 0), 1.0);
}

TEST(Autograd, AttentionBidirectionalAndCausal) {
  for (bool causal : {false, true}) {
    Rng rng(10);
    std::vector<Parameter> p{{"q", random_matrix(rng, 6, 4)},
                             {"k", random_matrix(rng, 6, 4)},
                             {"v", random_matrix(rng, 6, 4)}};
    EXPECT_LT(max_gradient_error(p, [causal](Tape& t, const auto& v) {
                return attention(t, v[0], v[1], v[2], 2, 3, 2, causal);
              }),
              kTol);
  }
}

TEST(Autograd, AttentionMatchesDirectComputation) {
  Rng rng(11);
  const Matrix Q = random_matrix(rng, 3, 2), K = random_matrix(rng, 3, 2), V = random_matrix(rng, 3, 2);
  Tape t;
  const Matrix out = t.value(attention(t, t.constant(Q), t.constant(K), t.constant(V), 1, 3, 1));
  for (int i = 0; i < 3; ++i) {
    double z = 0.0;
    Eigen::RowVector2d acc = Eigen::RowVector2d::Zero();
    for (int j = 0; j < 3; ++j) {
      const double w = std::exp(Q.row(i).dot(K.row(j)) / std::sqrt(2.0));
      z += w;
      acc += w * V.row(j);
    }
    EXPECT_NEAR(out(i, 0), acc(0) / z, 1e-12);
    EXPECT_NEAR(out(i, 1), acc(1) / z, 1e-12);
  }
  EXPECT_EQ(t.matmul_flops(), 2u * 2 * 3 * 2 * 3);
}

TEST(Autograd, MaskedCrossEntropy) {
  Rng rng(12);
  std::vector<Parameter> p{{"logits", random_matrix(rng, 4, 5)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) {
              return masked_cross_entropy(t, v[0], {0, 2, 3}, {4, 1, 1});
            }),
            kTol);
}

TEST(Autograd, MaskedCrossEntropyValueAndEmpty) {
  Tape t;
  const Var x = t.constant((Matrix(1, 3) << 1.0, 2.0, 3.0).finished());
  const double expected = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 2.0;
  EXPECT_NEAR(t.scalar(masked_cross_entropy(t, x, {0}, {1})), expected, 1e-14);
  try {
    masked_cross_entropy(t, x, {}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUndefinedLoss);
  }
}

TEST(Autograd, ColumnMean) {
  Rng rng(13);
  std::vector<Parameter> p{{"x", random_matrix(rng, 5, 3)}};
  EXPECT_LT(max_gradient_error(p, [](Tape& t, const auto& v) { return column_mean(t, v[0]); }), kTol);
}

TEST(Autograd, ReusedNodeAccumulates) {
  Parameter a("a", (Matrix(1, 1) << 3.0).finished());
  Tape t;
  const Var x = t.parameter(a);
  const Var y = mul(t, x, x);  // d/da a^2 = 2a
  t.backward(dot_constant(t, y, Matrix::Ones(1, 1)));
  EXPECT_DOUBLE_EQ(a.grad(0, 0), 6.0);
}

TEST(Autograd, BackwardNeedsScalarRoot) {
  Tape t;
  const Var x = t.constant(Matrix::Ones(2, 2));
  EXPECT_THROW(t.backward(x), Error);
}

TEST(Autograd, MatmulFlopCount) {
  Tape t;
  matmul(t, t.constant(Matrix::Ones(3, 4)), t.constant(Matrix::Ones(4, 5)));
  EXPECT_EQ(t.matmul_flops(), 2u * 3 * 4 * 5);
}

TEST(Autograd, ShapeMismatchIsInvalidInput) {
  Tape t;
  try {
    matmul(t, t.constant(Matrix::Ones(3, 4)), t.constant(Matrix::Ones(3, 4)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidInput);
  }
}
