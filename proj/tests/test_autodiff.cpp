#include "veloio/autodiff.hpp"

#include <gtest/gtest.h>

#include <random>

#include "support/oracles.hpp"
#include "veloio/optim.hpp"

using namespace veloio;
using namespace veloio::ad;

namespace {

std::vector<double> randn(std::mt19937_64& rng, std::size_t n, double sigma = 1.0) {
  std::normal_distribution<double> d(0.0, sigma);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Analytic gradient of f(leaf) vs central differences, h = 1e-4.
void expect_grad_matches(
    const std::function<Tensor(Graph&, Tensor)>& build,
    const std::vector<int>& shape, std::vector<double> x0, double tol = 1e-4) {
  Graph g;
  Tensor x = g.leaf(shape, x0);
  Tensor loss = build(g, x);
  g.backward(loss);
  std::vector<double> analytic = x.grad();

  auto f = [&](const std::vector<double>& xv) {
    Graph gg;
    Tensor xx = gg.leaf(shape, xv);
    return build(gg, xx).value();
  };
  std::vector<double> fd = oracles::central_diff(f, x0);
  EXPECT_LT(oracles::rel_err(analytic, fd), tol);
}

}  // namespace

TEST(Linear, IdentityCase) {
  Graph g;
  Tensor y = g.linear(g.constant({2}, {1, 2}), g.constant({2, 2}, {1, 0, 0, 1}),
                      g.constant({2}, {0, 0}));
  EXPECT_EQ(y.values(), (std::vector<double>{1, 2}));
}

TEST(Linear, HandCase) {
  Graph g;
  Tensor y = g.linear(g.constant({2}, {1, 0}), g.constant({2, 2}, {2, 3, 4, 5}),
                      g.constant({2}, {1, 1}));
  EXPECT_EQ(y.values(), (std::vector<double>{3, 4}));
}

TEST(Linear, WeightGradientMatchesOuterProductOracle) {
  std::mt19937_64 rng(17);
  std::vector<double> xv = randn(rng, 3), wv = randn(rng, 12), bv = randn(rng, 4);
  Graph g;
  Tensor x = g.constant({3}, xv);
  Tensor w = g.leaf({3, 4}, wv);
  Tensor b = g.constant({4}, bv);
  g.backward(g.sum(g.linear(x, w, b)));
  // d sum(xW+b) / dW = outer(x, ones)
  std::vector<double> expected(12);
  for (int i = 0; i < 3; ++i)
    for (int o = 0; o < 4; ++o) expected[i * 4 + o] = xv[i];
  EXPECT_LT(oracles::rel_err(w.grad(), expected), 1e-12);

  // and against finite differences
  auto f = [&](const std::vector<double>& wvv) {
    Graph gg;
    return gg.sum(gg.linear(gg.constant({3}, xv), gg.leaf({3, 4}, wvv),
                            gg.constant({4}, bv)))
        .value();
  };
  EXPECT_LT(oracles::rel_err(w.grad(), oracles::central_diff(f, wv)), 1e-6);
}

TEST(Linear, ShapeMismatchReportsBothShapes) {
  Graph g;
  try {
    g.linear(g.constant({3}, {1, 2, 3}), g.constant({2, 2}, {1, 0, 0, 1}),
             g.constant({2}, {0, 0}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[3]"), std::string::npos);
    EXPECT_NE(msg.find("[2,2]"), std::string::npos);
  }
}

TEST(Conv1dK1, IdentityWeights) {
  Graph g;
  std::vector<double> xv{1, 2, 3, 4, 5, 6};
  Tensor y = g.conv1d_k1(g.constant({2, 3}, xv), g.constant({2, 2}, {1, 0, 0, 1}),
                         g.constant({2}, {0, 0}));
  EXPECT_EQ(y.values(), xv);
}

TEST(Conv1dK1, EqualsLinearOnTranspose) {
  std::mt19937_64 rng(4);
  std::vector<double> xv = randn(rng, 12), wv = randn(rng, 20), bv = randn(rng, 5);
  Graph g;
  Tensor x = g.constant({4, 3}, xv);   // [C_in=4, T=3]
  Tensor w = g.constant({5, 4}, wv);   // [C_out=5, C_in=4]
  Tensor b = g.constant({5}, bv);
  Tensor conv = g.conv1d_k1(x, w, b);
  // linear wants W as [in, out]
  Tensor lin = g.transpose(g.linear(g.transpose(x), g.transpose(w), b));
  EXPECT_LT(oracles::rel_err(conv.values(), lin.values()), 1e-14);
}

TEST(Conv1dK1, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::vector<double> wv = randn(rng, 6), xv = randn(rng, 8), bv = randn(rng, 3);
  auto f = [&](const std::vector<double>& w) {
    Graph gg;
    return gg.sum(gg.gelu(gg.conv1d_k1(gg.constant({2, 4}, xv), gg.leaf({3, 2}, w),
                                       gg.constant({3}, bv))))
        .value();
  };
  Graph g;
  Tensor w = g.leaf({3, 2}, wv);
  g.backward(g.sum(g.gelu(g.conv1d_k1(g.constant({2, 4}, xv), w, g.constant({3}, bv)))));
  EXPECT_LT(oracles::rel_err(w.grad(), oracles::central_diff(f, wv)), 1e-6);
}

TEST(Affine, IdentityAndHandCase) {
  Graph g;
  Tensor ones = g.constant({2}, {1, 1});
  Tensor zeros = g.constant({2}, {0, 0});
  Tensor x = g.constant({2}, {2, 3});
  EXPECT_EQ(g.affine(x, ones, zeros).values(), (std::vector<double>{2, 3}));
  Tensor y = g.affine(x, g.constant({2}, {10, 100}), g.constant({2}, {1, 1}));
  EXPECT_EQ(y.values(), (std::vector<double>{21, 301}));
}

TEST(Affine, AlphaGradientEqualsInput) {
  std::mt19937_64 rng(8);
  std::vector<double> xv = randn(rng, 4), av = randn(rng, 4), bv = randn(rng, 4);
  Graph g;
  Tensor a = g.leaf({4}, av);
  g.backward(g.sum(g.affine(g.constant({4}, xv), a, g.constant({4}, bv))));
  EXPECT_LT(oracles::rel_err(a.grad(), xv), 1e-12);
  auto f = [&](const std::vector<double>& avv) {
    Graph gg;
    return gg.sum(gg.affine(gg.constant({4}, xv), gg.leaf({4}, avv),
                            gg.constant({4}, bv)))
        .value();
  };
  EXPECT_LT(oracles::rel_err(a.grad(), oracles::central_diff(f, av)), 1e-6);
}

TEST(Gelu, ZeroAndAsymptotes) {
  Graph g;
  Tensor y = g.gelu(g.constant({3}, {0.0, 20.0, -20.0}));
  EXPECT_DOUBLE_EQ(y.values()[0], 0.0);
  EXPECT_NEAR(y.values()[1], 20.0, 1e-9);
  EXPECT_NEAR(y.values()[2], 0.0, 1e-9);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  expect_grad_matches([](Graph& g, Tensor x) { return g.sum(g.gelu(x)); }, {5},
                      randn(rng, 5), 1e-5);
}

TEST(GlobalAvgPool, ConstantAndHandCase) {
  Graph g;
  Tensor c = g.global_avg_pool(g.constant({2, 3}, {7, 7, 7, -2, -2, -2}));
  EXPECT_EQ(c.values(), (std::vector<double>{7, -2}));
  Tensor y = g.global_avg_pool(g.constant({2, 2}, {1, 3, 2, 6}));
  EXPECT_EQ(y.values(), (std::vector<double>{2, 4}));
}

TEST(GlobalAvgPool, GradientIsOneOverT) {
  Graph g;
  Tensor x = g.leaf({2, 4}, std::vector<double>(8, 1.0));
  g.backward(g.sum(g.global_avg_pool(x)));
  for (double v : x.grad()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, UniformAndHandCase) {
  Graph g;
  Tensor u = g.softmax(g.constant({3}, {0, 0, 0}));
  for (double v : u.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  Tensor y = g.softmax(g.constant({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  EXPECT_NEAR(y.values()[0], 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(y.values()[1], 2.0 / 6.0, 1e-12);
  EXPECT_NEAR(y.values()[2], 3.0 / 6.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(10);
  std::vector<double> xv = randn(rng, 12, 3.0);
  Graph g;
  Tensor y = g.softmax(g.constant({3, 4}, xv));
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int c = 0; c < 4; ++c) s += y.values()[r * 4 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  std::vector<double> shifted = xv;
  for (auto& v : shifted) v += 17.5;
  Tensor y2 = g.softmax(g.constant({3, 4}, shifted));
  EXPECT_LT(oracles::rel_err(y.values(), y2.values()), 1e-12);
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  Tensor x = g.leaf({3}, {4, 5, 6});
  g.backward(g.sum(x));
  EXPECT_EQ(x.grad(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, ElementwiseSquareHandCase) {
  Graph g;
  Tensor x = g.leaf({3}, {1, 2, 3});
  g.backward(g.sum(g.mul(x, x)));
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, CompositeChainMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  std::vector<double> xv = randn(rng, 6);
  std::vector<double> wv = randn(rng, 9), bv = randn(rng, 3);
  auto build = [&](Graph& g, Tensor x) {
    Tensor h = g.gelu(g.linear(x, g.constant({3, 3}, wv), g.constant({3}, bv)));
    return g.sum(g.global_avg_pool(g.transpose(h)));
  };
  expect_grad_matches(
      [&](Graph& g, Tensor x) { return build(g, x); }, {2, 3}, xv, 1e-5);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph g;
  Tensor x = g.leaf({3}, {1, 2, 3});
  EXPECT_THROW(g.backward(g.mul(x, x)), ShapeError);
}

TEST(Backward, DisconnectedLeafGetsZeroGrad) {
  Graph g;
  Tensor x = g.leaf({2}, {1, 2});
  Tensor y = g.leaf({2}, {3, 4});
  g.backward(g.sum(g.mul(x, x)));
  EXPECT_EQ(y.grad(), (std::vector<double>{0, 0}));
}

TEST(Backward, LeafUsedTwiceAccumulates) {
  // Using one leaf twice must equal the sum of per-use gradients from a
  // duplicated-leaf graph.
  std::vector<double> xv{0.3, -1.2, 0.7};
  Graph g;
  Tensor x = g.leaf({3}, xv);
  g.backward(g.sum(g.mul(x, g.gelu(x))));

  Graph g2;
  Tensor xa = g2.leaf({3}, xv);
  Tensor xb = g2.leaf({3}, xv);
  g2.backward(g2.sum(g2.mul(xa, g2.gelu(xb))));
  std::vector<double> summed(3);
  for (int i = 0; i < 3; ++i) summed[i] = xa.grad()[i] + xb.grad()[i];
  EXPECT_LT(oracles::rel_err(x.grad(), summed), 1e-14);
}

TEST(Backward, ParamGradAccumulatesAcrossUses) {
  ParamSet ps;
  Parameter& p = ps.add("w", {2}, {1.0, 2.0});
  Graph g;
  Tensor a = g.param(p);
  Tensor b = g.param(p);
  g.backward(g.sum(g.add(a, b)));
  EXPECT_EQ(p.grad, (std::vector<double>{2, 2}));
}

TEST(Determinism, SameSeedBitIdentical) {
  auto run = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<double> xv = randn(rng, 8), wv = randn(rng, 16), bv = randn(rng, 8);
    Graph g;
    Tensor x = g.leaf({4, 2}, std::vector<double>(xv.begin(), xv.begin() + 8));
    Tensor h = g.gelu(g.linear(x, g.constant({2, 8}, wv), g.constant({8}, bv)));
    Tensor loss = g.mean(g.square(h));
    g.backward(loss);
    auto out = x.grad();
    out.push_back(loss.value());
    return out;
  };
  EXPECT_EQ(run(42), run(42));
}

TEST(Primitives, AllGradsMatchFiniteDifferencesOver100Seeds) {
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    // linear
    {
      std::vector<double> wv = randn(rng, 6), bv = randn(rng, 2);
      expect_grad_matches(
          [&](Graph& g, Tensor x) {
            return g.sum(g.linear(x, g.constant({3, 2}, wv), g.constant({2}, bv)));
          },
          {2, 3}, randn(rng, 6));
    }
    // conv1d_k1
    {
      std::vector<double> wv = randn(rng, 6), bv = randn(rng, 2);
      expect_grad_matches(
          [&](Graph& g, Tensor x) {
            return g.sum(g.conv1d_k1(x, g.constant({2, 3}, wv), g.constant({2}, bv)));
          },
          {3, 4}, randn(rng, 12));
    }
    // affine
    {
      std::vector<double> av = randn(rng, 3), bv = randn(rng, 3);
      expect_grad_matches(
          [&](Graph& g, Tensor x) {
            return g.sum(g.affine(x, g.constant({3}, av), g.constant({3}, bv)));
          },
          {2, 3}, randn(rng, 6));
    }
    // gelu
    expect_grad_matches([](Graph& g, Tensor x) { return g.sum(g.gelu(x)); }, {4},
                        randn(rng, 4));
    // pool
    expect_grad_matches(
        [](Graph& g, Tensor x) { return g.sum(g.square(g.global_avg_pool(x))); },
        {2, 3}, randn(rng, 6));
    // softmax (through a nonlinear readout so the grad is nontrivial)
    expect_grad_matches(
        [](Graph& g, Tensor x) {
          Tensor p = g.softmax(x);
          return g.sum(g.mul(p, p));
        },
        {5}, randn(rng, 5));
    // exp/log/div/at
    expect_grad_matches(
        [](Graph& g, Tensor x) {
          Tensor e = g.exp(x);
          return g.div_scalar(g.at(e, 1), g.sum(e));
        },
        {4}, randn(rng, 4));
  }
}

TEST(Adam, ConvergesOnQuadratic) {
  ParamSet ps;
  Parameter& p = ps.add("x", {2}, {5.0, -3.0});
  Adam opt(0.05);
  for (int i = 0; i < 800; ++i) {
    ps.zero_grad();
    Graph g;
    Tensor x = g.param(p);
    g.backward(g.sum(g.square(g.sub(x, g.constant({2}, {1.0, 2.0})))));
    opt.step(ps);
  }
  EXPECT_NEAR(p.value[0], 1.0, 1e-3);
  EXPECT_NEAR(p.value[1], 2.0, 1e-3);
}
