#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "crackkw/gradcheck.hpp"
#include "crackkw/ops.hpp"
#include "crackkw/random.hpp"

using namespace crackkw;

namespace {

// Quadruple-loop direct summation with explicit zero padding.
Tensor conv_oracle(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out(Shape{N, K, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < K; ++o)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xx = 0; xx < Wo; ++xx) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += x.at(n, c, iy, ix) * k.at(o, c, i, j);
              }
          out.at(n, o, y, xx) = acc;
        }
  return out;
}

Tensor eval(const std::function<Var(Graph&)>& f) {
  Graph g;
  return f(g).value();
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1, 1}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW((void)t.reshaped(Shape{4}), ShapeError);
}

TEST(Tensor, BinaryFormatLayout) {
  Tensor t(Shape{1, 2}, std::vector<double>{1.0, -2.5});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 1u + 2u * 8u + 2u * 8u);
  EXPECT_EQ(bytes.substr(0, 4), "CKT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 1u);  // little-endian extent 1
  EXPECT_EQ(static_cast<unsigned char>(bytes[13]), 2u);
  ss.seekg(0);
  EXPECT_EQ(read_tensor(ss), t);

  std::stringstream bad("XXXX");
  EXPECT_THROW(read_tensor(bad), std::runtime_error);
}

TEST(Tensor, RandomRoundTripIsBitExact) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Shape s;
    const auto rank = rng.integer(0, 4);
    for (int a = 0; a < rank; ++a) s.push_back(static_cast<std::size_t>(rng.integer(1, 5)));
    Tensor t = rng.normal_tensor(s, 10.0);
    std::stringstream ss;
    write_tensor(ss, t);
    EXPECT_EQ(read_tensor(ss), t);
  }
}

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  Rng rng(1);
  auto out = eval([&](Graph& g) {
    return conv2d(g.constant(Tensor(Shape{1, 1, 3, 3}, 0.0)), g.constant(rng.normal_tensor(Shape{2, 1, 2, 2})));
  });
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, ScalarKernelScalesInput) {
  auto out = eval([&](Graph& g) {
    return conv2d(g.constant(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4})), g.constant(Tensor(Shape{1, 1, 1, 1}, {2})));
  });
  EXPECT_EQ(out, Tensor(Shape{1, 1, 2, 2}, std::vector<double>{2, 4, 6, 8}));
}

TEST(Conv2d, MatchesDirectSummationOracle) {
  Rng rng(11);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}}) {
    Tensor x = rng.normal_tensor(Shape{1, 2, 5, 5});
    Tensor k = rng.normal_tensor(Shape{3, 2, 3, 3});
    auto out = eval([&](Graph& g) { return conv2d(g.constant(x), g.constant(k), stride, pad); });
    EXPECT_LT(max_abs_diff(out, conv_oracle(x, k, stride, pad)), 1e-12);
  }
}

TEST(Conv2d, RejectsMismatchedShapesNamingBoth) {
  Graph g;
  Var x = g.constant(Tensor(Shape{1, 2, 5, 5}));
  Var k = g.constant(Tensor(Shape{3, 4, 3, 3}));
  try {
    conv2d(x, k);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x2x5x5]"), std::string::npos);
    EXPECT_NE(msg.find("[3x4x3x3]"), std::string::npos);
  }
  // (6 - 3) is not divisible by 2
  EXPECT_THROW(conv2d(g.constant(Tensor(Shape{1, 1, 6, 6})), g.constant(Tensor(Shape{1, 1, 3, 3})), 2, 0), ShapeError);
}

TEST(Conv2d, IsLinearInInput) {
  Rng rng(5);
  Tensor x = rng.normal_tensor(Shape{2, 3, 6, 6}), y = rng.normal_tensor(Shape{2, 3, 6, 6});
  Tensor k = rng.normal_tensor(Shape{4, 3, 3, 3});
  const double a = 0.7, b = -1.3;
  Tensor mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
  auto lhs = eval([&](Graph& g) { return conv2d(g.constant(mix), g.constant(k), 1, 1); });
  auto cx = eval([&](Graph& g) { return conv2d(g.constant(x), g.constant(k), 1, 1); });
  auto cy = eval([&](Graph& g) { return conv2d(g.constant(y), g.constant(k), 1, 1); });
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * cx[i] + b * cy[i], 1e-12);
}

TEST(Pool, ConstantFieldAndFourElementCase) {
  auto constant = Tensor(Shape{1, 3, 2, 2}, 0.25);
  for (auto mode : {PoolMode::avg, PoolMode::max}) {
    auto out = eval([&](Graph& g) { return pool_spatial(g.constant(constant), mode); });
    for (double v : out.data()) EXPECT_EQ(v, 0.25);
  }
  Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(eval([&](Graph& g) { return pool_spatial(g.constant(x), PoolMode::avg); }).item(), 2.5);
  EXPECT_EQ(eval([&](Graph& g) { return pool_spatial(g.constant(x), PoolMode::max); }).item(), 4.0);
}

TEST(Pool, SpatialMatchesLoopOracle) {
  Rng rng(2);
  Tensor x = rng.normal_tensor(Shape{2, 3, 4, 4});
  auto avg = eval([&](Graph& g) { return pool_spatial(g.constant(x), PoolMode::avg); });
  auto mx = eval([&](Graph& g) { return pool_spatial(g.constant(x), PoolMode::max); });
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0, m = -1e300;
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 4; ++w) {
          s += x.at(n, c, h, w);
          m = std::max(m, x.at(n, c, h, w));
        }
      EXPECT_EQ(avg.at(n, c, 0, 0), s / 16.0);
      EXPECT_EQ(mx.at(n, c, 0, 0), m);
    }
}

TEST(Pool, ChannelReductions) {
  Rng rng(4);
  Tensor single = rng.normal_tensor(Shape{2, 1, 3, 3});
  for (auto mode : {PoolMode::avg, PoolMode::max}) {
    auto out = eval([&](Graph& g) { return pool_channel(g.constant(single), mode); });
    EXPECT_EQ(out, single);
  }
  Tensor px(Shape{1, 3, 1, 1}, {1, 5, 3});
  EXPECT_EQ(eval([&](Graph& g) { return pool_channel(g.constant(px), PoolMode::avg); }).item(), 3.0);
  EXPECT_EQ(eval([&](Graph& g) { return pool_channel(g.constant(px), PoolMode::max); }).item(), 5.0);

  Tensor x = rng.normal_tensor(Shape{2, 4, 3, 5});
  auto avg = eval([&](Graph& g) { return pool_channel(g.constant(x), PoolMode::avg); });
  auto mx = eval([&](Graph& g) { return pool_channel(g.constant(x), PoolMode::max); });
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 5; ++w) {
        double s = 0.0, m = -1e300;
        for (std::size_t c = 0; c < 4; ++c) {
          s += x.at(n, c, h, w);
          m = std::max(m, x.at(n, c, h, w));
        }
        EXPECT_EQ(avg.at(n, 0, h, w), s / 4.0);
        EXPECT_EQ(mx.at(n, 0, h, w), m);
      }
}

TEST(Pool, MaxTieRoutesGradientToFirstElement) {
  Graph g;
  Var x = g.leaf(Tensor(Shape{1, 1, 2, 2}, {3, 1, 3, 2}));
  g.backward(sum(pool_spatial(x, PoolMode::max)));
  EXPECT_EQ(*g.grad(x), Tensor(Shape{1, 1, 2, 2}, std::vector<double>{1, 0, 0, 0}));
}

TEST(Elementwise, KnownValuesAndShapeErrors) {
  Graph g;
  Var z = g.constant(Tensor::scalar(0.0));
  EXPECT_EQ(sigmoid(z).value().item(), 0.5);
  EXPECT_EQ(crackkw::tanh(z).value().item(), 0.0);
  Var a = g.constant(Tensor(Shape{2, 2}, 1.0));
  Var b = g.constant(Tensor(Shape{4}, 1.0));
  EXPECT_THROW(add(a, b), ShapeError);
  // Scalar broadcast on either side.
  EXPECT_EQ(mul(a, g.constant(Tensor::scalar(3.0))).value(), Tensor(Shape{2, 2}, 3.0));
  EXPECT_EQ(sub(g.constant(Tensor::scalar(3.0)), a).value(), Tensor(Shape{2, 2}, 2.0));
}

TEST(Elementwise, SigmoidGradientMatchesFiniteDifference) {
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const double x = rng.uniform(-6, 6);
    Graph g;
    Var v = g.leaf(Tensor::scalar(x));
    g.backward(sigmoid(v));
    const double analytic = (*g.grad(v))[0];
    const double eps = 1e-5;
    auto s = [](double t) { return 1.0 / (1.0 + std::exp(-t)); };
    const double numeric = (s(x + eps) - s(x - eps)) / (2 * eps);
    EXPECT_LT(std::abs(analytic - numeric) / std::max(1e-12, std::abs(analytic)), 1e-6);
  }
}

TEST(Linear, IdentityAndHandCaseAndOracle) {
  Graph g;
  Var x = g.constant(Tensor(Shape{1, 2}, {1, 2}));
  Var eye = g.constant(Tensor(Shape{2, 2}, {1, 0, 0, 1}));
  Var zero = g.constant(Tensor(Shape{2}, 0.0));
  EXPECT_EQ(linear(x, eye, zero).value(), x.value());
  Var w = g.constant(Tensor(Shape{2, 2}, {1, 1, 1, -1}));
  EXPECT_EQ(linear(x, w, zero).value(), Tensor(Shape{1, 2}, std::vector<double>{3, -1}));
  EXPECT_THROW(linear(x, g.constant(Tensor(Shape{2, 3})), zero), ShapeError);

  Rng rng(9);
  Tensor xi = rng.normal_tensor(Shape{4, 5}), wi = rng.normal_tensor(Shape{3, 5}), bi = rng.normal_tensor(Shape{3});
  auto out = linear(g.constant(xi), g.constant(wi), g.constant(bi)).value();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = bi[o];
      for (std::size_t i = 0; i < 5; ++i) acc += wi[o * 5 + i] * xi[r * 5 + i];
      EXPECT_NEAR(out[r * 3 + o], acc, 1e-12);
    }
}

TEST(Backward, SumAndSquares) {
  Rng rng(6);
  Tensor x = rng.normal_tensor(Shape{2, 3, 2});
  {
    Graph g;
    Var v = g.leaf(x);
    g.backward(sum(v));
    EXPECT_EQ(*g.grad(v), Tensor(x.shape(), 1.0));
  }
  {
    Graph g;
    Var v = g.leaf(x);
    g.backward(sum(mul(v, v)));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ((*g.grad(v))[i], 2 * x[i]);
  }
}

TEST(Backward, FanOutAccumulatesAndNonScalarRejected) {
  Graph g;
  Var v = g.leaf(Tensor(Shape{3}, {1, 2, 3}));
  Var y = add(scale(v, 2.0), v);  // dy/dv = 3
  g.backward(sum(y));
  EXPECT_EQ(*g.grad(v), Tensor(Shape{3}, 3.0));
  EXPECT_THROW(g.backward(y), ShapeError);
}

TEST(Backward, ParameterSinkAccumulatesAcrossGraphs) {
  Parameter p(Tensor(Shape{2}, {1.0, -1.0}));
  for (int i = 0; i < 2; ++i) {
    Graph g;
    g.backward(sum(mul(g.param(p), g.param(p))));
  }
  EXPECT_EQ(p.grad, Tensor(Shape{2}, std::vector<double>{4.0, -4.0}));
  p.zero_grad();
  EXPECT_EQ(p.grad, Tensor(Shape{2}, 0.0));
}

TEST(GradCheck, SumAndSquaresAreTight) {
  Rng rng(12);
  Tensor x = rng.normal_tensor(Shape{3, 4});
  EXPECT_LT(finite_diff_check([](Graph&, Var v) { return sum(v); }, x).max_rel_error, 1e-9);
  EXPECT_LT(finite_diff_check([](Graph&, Var v) { return sum(mul(v, v)); }, x, 1e-5).max_rel_error, 1e-9);
}

TEST(GradCheck, ReportsNonFiniteCoordinate) {
  Tensor x(Shape{2}, {1.0, 1000.0});
  auto f = [](Graph&, Var v) { return sum(crackkw::exp(v)); };
  EXPECT_THROW(finite_diff_check(f, x), NumericError);
}

TEST(GradCheck, PrimitivesOnRandomSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Tensor x = rng.normal_tensor(Shape{1, 2, 5, 5});
    Tensor k = rng.normal_tensor(Shape{3, 2, 3, 3});
    Tensor w = rng.normal_tensor(Shape{3, 5}), b = rng.normal_tensor(Shape{3});
    auto conv_x = [&](Graph& g, Var v) { return sum(mul(conv2d(v, g.constant(k), 1, 1), conv2d(v, g.constant(k), 1, 1))); };
    auto conv_k = [&](Graph& g, Var v) { return sum(crackkw::tanh(conv2d(g.constant(x), v, 2, 1))); };
    auto pools = [&](Graph&, Var v) {
      return add(sum(mul(pool_spatial(v, PoolMode::max), pool_spatial(v, PoolMode::avg))),
                 sum(crackkw::tanh(add(pool_channel(v, PoolMode::max), pool_channel(v, PoolMode::avg)))));
    };
    auto lin = [&](Graph& g, Var v) {
      return sum(sigmoid(linear(reshape(v, Shape{10, 5}), g.constant(w), g.constant(b))));
    };
    EXPECT_LT(finite_diff_check(conv_x, x).max_rel_error, 1e-4) << seed;
    EXPECT_LT(finite_diff_check(conv_k, k).max_rel_error, 1e-4) << seed;
    EXPECT_LT(finite_diff_check(pools, x).max_rel_error, 1e-4) << seed;
    EXPECT_LT(finite_diff_check(lin, x).max_rel_error, 1e-4) << seed;
  }
}

TEST(Ops, ConcatSliceUpsampleGradients) {
  Rng rng(21);
  Tensor x = rng.normal_tensor(Shape{2, 3, 2, 2});
  auto f = [](Graph&, Var v) {
    Var c = concat({v, scale(v, 2.0)}, 1);
    Var s = slice(c, 1, 2, 3);
    return sum(crackkw::tanh(upsample_nearest(s, 2)));
  };
  EXPECT_LT(finite_diff_check(f, x).max_rel_error, 1e-6);
  Graph g;
  Var v = g.constant(x);
  EXPECT_EQ(upsample_nearest(v, 2).shape(), (Shape{2, 3, 4, 4}));
  EXPECT_THROW(slice(v, 1, 2, 2), ShapeError);
}

TEST(Ops, ChannelBias) {
  Rng rng(4);
  Tensor x = rng.normal_tensor(Shape{2, 3, 2, 2}), b = rng.normal_tensor(Shape{3});
  Graph g;
  Var y = add_channel_bias(g.constant(x), g.constant(b));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y.value().at(n, c, 1, 0), x.at(n, c, 1, 0) + b[c]);
  EXPECT_THROW(add_channel_bias(g.constant(x), g.constant(Tensor(Shape{2}))), ShapeError);
  auto fx = [&](Graph& gg, Var v) { return sum(crackkw::tanh(add_channel_bias(v, gg.constant(b)))); };
  auto fb = [&](Graph& gg, Var v) { return sum(crackkw::tanh(add_channel_bias(gg.constant(x), v))); };
  EXPECT_LT(finite_diff_check(fx, x).max_rel_error, 1e-6);
  EXPECT_LT(finite_diff_check(fb, b).max_rel_error, 1e-6);
}

TEST(Ops, BatchNormTrainingNormalizesPerChannel) {
  Rng rng(9);
  Tensor x = rng.normal_tensor(Shape{3, 2, 4, 4});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 5.0 + 3.0 * x[i];
  NormStats st(2);
  Graph g;
  Var y = batch_norm(g.constant(x), g.constant(Tensor(Shape{2}, 1.0)), g.constant(Tensor(Shape{2}, 0.0)), st, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 16; ++i) m += y.value()[(n * 2 + c) * 16 + i];
    m /= 48.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 16; ++i) v += std::pow(y.value()[(n * 2 + c) * 16 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 48.0, 1.0, 1e-4);
  }
  // Running stats moved toward the batch (mean near 5) by the momentum.
  EXPECT_GT(st.mean[0], 0.0);
  EXPECT_LT(st.mean[0], 5.0 * 0.03 * 1.5);
}

TEST(Ops, BatchNormGradients) {
  Rng rng(10);
  Tensor x = rng.normal_tensor(Shape{2, 3, 3, 3}), w = rng.normal_tensor(Shape{2, 3, 3, 3});
  Tensor gamma = rng.uniform_tensor(Shape{3}, 0.5, 1.5), beta = rng.normal_tensor(Shape{3});
  for (bool training : {true, false}) {
    NormStats st(3);
    st.mean = rng.normal_tensor(Shape{3});
    st.var = rng.uniform_tensor(Shape{3}, 0.5, 2.0);
    const NormStats frozen = st;
    auto bn = [&](Graph& gg, Var xv, Var gv, Var bv) {
      NormStats local = frozen;  // keeps every evaluation identical
      return sum(mul(crackkw::tanh(batch_norm(xv, gv, bv, local, training)), gg.constant(w)));
    };
    auto fx = [&](Graph& gg, Var v) { return bn(gg, v, gg.constant(gamma), gg.constant(beta)); };
    auto fg = [&](Graph& gg, Var v) { return bn(gg, gg.constant(x), v, gg.constant(beta)); };
    auto fb = [&](Graph& gg, Var v) { return bn(gg, gg.constant(x), gg.constant(gamma), v); };
    EXPECT_LT(finite_diff_check(fx, x).max_rel_error, 1e-6) << "training " << training;
    EXPECT_LT(finite_diff_check(fg, gamma).max_rel_error, 1e-6) << "training " << training;
    EXPECT_LT(finite_diff_check(fb, beta).max_rel_error, 1e-6) << "training " << training;
  }
}

TEST(Determinism, IdenticalSeedsGiveBitIdenticalOutputs) {
  auto run = [] {
    Rng rng(77);
    Tensor x = rng.normal_tensor(Shape{2, 3, 6, 6});
    Tensor k = rng.normal_tensor(Shape{4, 3, 3, 3});
    Graph g;
    Var kv = g.leaf(k);
    Var y = sigmoid(conv2d(g.constant(x), kv, 1, 1));
    g.backward(mean(y));
    return std::make_pair(y.value(), *g.grad(kv));
  };
  EXPECT_EQ(run(), run());
}
