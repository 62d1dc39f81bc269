#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "support.hpp"

using namespace dflens;
using dflens::testing::op_gradient_error;
using dflens::testing::random_away_from_zero;
using dflens::testing::random_tensor;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

constexpr double kOpTol = 1e-5;

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Tensor, NonFiniteValuesAreRejected) {
  EXPECT_THROW(Tensor({1}, {std::numeric_limits<double>::quiet_NaN()}), NonFiniteError);
  EXPECT_THROW(scale(vec({1e300}), 1e300), NonFiniteError);
}

TEST(Elementwise, Examples) {
  EXPECT_EQ(relu(vec({-1, 0, 2})).vec(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(mul(vec({1, 2, 3}), vec({4, 5, 6})).vec(), (std::vector<double>{4, 10, 18}));
  const Tensor x = random_tensor({4, 5}, 3);
  EXPECT_TRUE(add(x, Tensor::scalar(0.0)).same_values(x));
  EXPECT_TRUE(add(x, Tensor::zeros(x.shape())).same_values(x));
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, RecordsOnlyWhenAnInputRequiresGrad) {
  GraphScope scope;
  const Tensor a = random_tensor({3}, 1), b = random_tensor({3}, 2);
  const Tensor c = add(a, b);
  EXPECT_FALSE(c.requires_grad());
  EXPECT_EQ(scope.graph().size(), 0u);
  const Tensor d = add(a.requiring_grad(), b);
  EXPECT_TRUE(d.requires_grad());
  EXPECT_EQ(scope.graph().size(), 1u);
  {
    NoGradGuard ng;
    EXPECT_FALSE(add(a.requiring_grad(), b).requires_grad());
  }
  EXPECT_EQ(scope.graph().size(), 1u);
}

TEST(Gradients, ElementwiseOps) {
  const Shape s{3, 4};
  const auto a = random_away_from_zero(s, 1), b = random_away_from_zero(s, 2);
  EXPECT_LT(op_gradient_error([](auto& in) { return add(in[0], in[1]); }, {a, b}, {true, true}, 1), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return sub(in[0], in[1]); }, {a, b}, {true, true}, 2), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return mul(in[0], in[1]); }, {a, b}, {true, true}, 3), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return mul(in[0], in[1]); }, {a, Tensor::scalar(1.7)}, {true, true}, 4),
            kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return scale(in[0], -2.5); }, {a}, {true}, 5), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return add_scalar(in[0], 0.3); }, {a}, {true}, 6), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return relu(in[0]); }, {a}, {true}, 7), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return silu(in[0]); }, {a}, {true}, 8), kOpTol);
}

TEST(Gradients, BiasAndReductions) {
  const auto x = random_tensor({3, 4, 5}, 11), b = random_tensor({3}, 12);
  EXPECT_LT(op_gradient_error([](auto& in) { return add_bias(in[0], in[1]); }, {x, b}, {true, true}, 1), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return sum(in[0]); }, {x}, {true}, 2), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return mean(in[0]); }, {x}, {true}, 3), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return global_average_pool(in[0]); }, {x}, {true}, 4), kOpTol);
}

TEST(Gradients, Conv2d) {
  const auto x = random_tensor({2, 5, 5}, 21), k3 = random_tensor({3, 2, 3, 3}, 22), k1 = random_tensor({3, 2, 1, 1}, 23);
  auto conv = [](std::size_t stride, std::size_t pad) {
    return [=](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], stride, pad); };
  };
  EXPECT_LT(op_gradient_error(conv(1, 1), {x, k3}, {true, true}, 1), kOpTol);
  EXPECT_LT(op_gradient_error(conv(1, 0), {x, k3}, {true, true}, 2), kOpTol);
  EXPECT_LT(op_gradient_error(conv(2, 1), {x, k3}, {true, true}, 3), kOpTol);
  EXPECT_LT(op_gradient_error(conv(1, 0), {x, k1}, {true, true}, 4), kOpTol);
}

TEST(Gradients, Conv2dInputMatchesFiniteDifferencesTightly) {
  const auto x = random_tensor({1, 3, 3}, 31), k = random_tensor({1, 1, 3, 3}, 32);
  const Tensor leaf = x.requiring_grad();
  GraphScope scope;
  const auto grads = scope.graph().backward(sum(conv2d(leaf, k, 1, 1)));
  const auto fd = dflens::testing::finite_difference(
      [&](const Tensor& xi) {
        NoGradGuard ng;
        return sum(conv2d(xi, k, 1, 1)).item();
      },
      x);
  EXPECT_LT(dflens::testing::relative_error(grads.get(leaf).vec(), fd), 1e-6);
}

TEST(Gradients, MatrixOps) {
  const auto a = random_tensor({3, 4}, 41), b = random_tensor({4, 2}, 42);
  const auto w = random_tensor({5, 4}, 43), bias = random_tensor({5}, 44);
  EXPECT_LT(op_gradient_error([](auto& in) { return matmul(in[0], in[1]); }, {a, b}, {true, true}, 1), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return transpose(in[0]); }, {a}, {true}, 2), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return linear(in[0], in[1], in[2]); }, {a, w, bias}, {true, true, true}, 3),
            kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return softmax(in[0], 0); }, {a}, {true}, 4), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return softmax(in[0], 1); }, {a}, {true}, 5), kOpTol);
}

TEST(Gradients, ResamplingAndLayout) {
  const auto x = random_tensor({2, 4, 4}, 51), y = random_tensor({3, 4, 4}, 52);
  EXPECT_LT(op_gradient_error([](auto& in) { return upsample_nearest(in[0], 2); }, {x}, {true}, 1), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return downsample_nearest(in[0], 2); }, {x}, {true}, 2), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return concat_channels(in[0], in[1]); }, {x, y}, {true, true}, 3), kOpTol);
  EXPECT_LT(op_gradient_error([](auto& in) { return reshape(in[0], {8, 4}); }, {x}, {true}, 4), kOpTol);
  const auto table = random_tensor({6, 3}, 53);
  EXPECT_LT(op_gradient_error([](auto& in) { return embedding(in[0], {4, 1, 4}); }, {table}, {true}, 5), kOpTol);
}

TEST(Conv2d, Examples) {
  const auto x = random_tensor({2, 5, 6}, 61);
  std::vector<double> eye(4, 0.0);
  eye[0] = 1.0;  // out 0 <- in 0
  eye[3] = 1.0;  // out 1 <- in 1
  EXPECT_TRUE(conv2d(x, Tensor({2, 2, 1, 1}, eye), 1, 0).same_values(x));
  const Tensor zero = conv2d(x, Tensor::zeros({3, 2, 3, 3}), 1, 1);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(conv2d(x, Tensor::zeros({3, 2, 3, 3}), 1, 1).shape(), (Shape{3, 5, 6}));
}

TEST(Conv2d, MatchesDirectLoop) {
  const auto x = random_tensor({2, 5, 5}, 62), k = random_tensor({3, 2, 3, 3}, 63);
  const Tensor y = conv2d(x, k, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{3, 3, 3}));
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 2; ++c) {
          for (std::size_t di = 0; di < 3; ++di) {
            for (std::size_t dj = 0; dj < 3; ++dj) {
              const long si = static_cast<long>(2 * i + di) - 1, sj = static_cast<long>(2 * j + dj) - 1;
              if (si < 0 || sj < 0 || si >= 5 || sj >= 5) continue;
              acc += x[(c * 5 + static_cast<std::size_t>(si)) * 5 + static_cast<std::size_t>(sj)] *
                     k[((o * 2 + c) * 3 + di) * 3 + dj];
            }
          }
        }
        EXPECT_NEAR(y[(o * 3 + i) * 3 + j], acc, 1e-12);
      }
    }
  }
}

TEST(Conv2d, Errors) {
  const auto x = random_tensor({1, 4, 4}, 64);
  EXPECT_THROW(conv2d(x, Tensor::zeros({1, 1, 2, 2}), 1, 0), ShapeError);  // even kernel
  EXPECT_THROW(conv2d(x, Tensor::zeros({1, 1, 3, 3}), 2, 1), ShapeError);  // (4 + 2 - 3) / 2 not integral
  EXPECT_THROW(conv2d(x, Tensor::zeros({1, 2, 3, 3}), 1, 1), ShapeError);  // channel mismatch
}

TEST(Backward, Examples) {
  const auto x = random_away_from_zero({5}, 71);
  {
    const Tensor leaf = x.requiring_grad();
    GraphScope scope;
    const auto g = scope.graph().backward(sum(mul(leaf, leaf)));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(g.get(leaf)[i], 2.0 * x[i]);
  }
  {
    const Tensor neg = Tensor({3}, {-1.0, -0.5, -2.0}, true);
    GraphScope scope;
    const auto g = scope.graph().backward(sum(relu(neg)));
    for (double v : g.get(neg).data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, NonScalarLossIsAnError) {
  const Tensor leaf = random_tensor({3}, 72).requiring_grad();
  GraphScope scope;
  EXPECT_THROW(scope.graph().backward(scale(leaf, 2.0)), ShapeError);
}

TEST(Backward, ConsumesTheTape) {
  const Tensor leaf = random_tensor({3}, 73).requiring_grad();
  GraphScope scope;
  const Tensor loss = sum(mul(leaf, leaf));
  EXPECT_GT(scope.graph().size(), 0u);
  scope.graph().backward(loss);
  EXPECT_EQ(scope.graph().size(), 0u);
}

TEST(Backward, CompositeConvReluSum) {
  const auto x = random_tensor({2, 6, 6}, 74), k = random_tensor({3, 2, 3, 3}, 75);
  const double err = op_gradient_error([](auto& in) { return relu(conv2d(in[0], in[1], 1, 1)); }, {x, k},
                                       {true, true}, 76);
  EXPECT_LT(err, kOpTol);
}

TEST(Backward, IsLinearInTheLoss) {
  const auto x = random_tensor({3, 4, 4}, 81), k = random_tensor({2, 3, 3, 3}, 82);
  const double a = 1.75, b = -0.6;
  auto grad_of = [&](const std::function<Tensor(const Tensor&)>& loss_fn) {
    const Tensor leaf = x.requiring_grad();
    GraphScope scope;
    return scope.graph().backward(loss_fn(leaf)).get(leaf);
  };
  auto f = [&](const Tensor& in) { return sum(silu(conv2d(in, k, 1, 1))); };
  auto g = [&](const Tensor& in) { return mean(mul(in, in)); };
  const Tensor combined = grad_of([&](const Tensor& in) { return add(scale(f(in), a), scale(g(in), b)); });
  const Tensor gf = grad_of(f), gg = grad_of(g);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(combined[i], a * gf[i] + b * gg[i], 1e-12);
}

TEST(Backward, TopologicalOrderOnTape) {
  const Tensor leaf = random_tensor({2, 4, 4}, 83).requiring_grad();
  GraphScope scope;
  const Tensor y = silu(add(leaf, upsample_nearest(downsample_nearest(leaf, 2), 2)));
  (void)sum(y);
  // Every node's inputs were produced by an earlier node or are leaves.
  std::set<std::uint64_t> produced{leaf.id()};
  for (const auto& node : scope.graph().nodes()) {
    for (const auto& in : node.inputs) {
      if (in.requires_grad()) EXPECT_TRUE(produced.count(in.id())) << "input recorded after its consumer";
    }
    produced.insert(node.output_id);
  }
}

TEST(GlobalAveragePool, Examples) {
  EXPECT_EQ(global_average_pool(Tensor({1, 2, 2}, {1, 3, 5, 7})).vec(), (std::vector<double>{4.0}));
  const Tensor c = global_average_pool(Tensor::full({2, 3, 3}, 2.5));
  EXPECT_EQ(c.vec(), (std::vector<double>{2.5, 2.5}));
  const auto x = random_tensor({4, 5, 6}, 91);
  const Tensor g = global_average_pool(x);
  for (std::size_t ch = 0; ch < 4; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 6; ++j) acc += x[(ch * 5 + i) * 6 + j];
    }
    EXPECT_NEAR(g[ch], acc / 30.0, 1e-14);
  }
  EXPECT_THROW(global_average_pool(Tensor::zeros({4, 5})), ShapeError);
}

TEST(Softmax, RowsSumToOne) {
  const Tensor s = softmax(random_tensor({4, 7}, 92, 5.0), 0);
  for (std::size_t j = 0; j < 7; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_GE(s[i * 7 + j], 0.0);
      acc += s[i * 7 + j];
    }
    EXPECT_NEAR(acc, 1.0, 1e-12);
  }
}

TEST(Tensor, DeterministicAcrossCalls) {
  const auto x = random_tensor({3, 8, 8}, 93), k = random_tensor({4, 3, 3, 3}, 94);
  EXPECT_TRUE(conv2d(x, k, 1, 1).same_values(conv2d(x, k, 1, 1)));
}
