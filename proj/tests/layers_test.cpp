#include "slil/layers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"

using slil::Rng;
using slil::Tensor;

namespace {

// Direct convolution reference: y[b,o,t'] = sum_{c,j} w[o,c,j] x[b,c,t's+j] + bias[o].
std::vector<double> conv_ref(const std::vector<double>& x, int64_t B, int64_t C,
                             int64_t T, const std::vector<double>& w,
                             const std::vector<double>& bias, int64_t O, int64_t K,
                             int64_t stride) {
  int64_t Tp = (T - K) / stride + 1;
  std::vector<double> y(static_cast<size_t>(B * O * Tp), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t o = 0; o < O; ++o) {
      for (int64_t t = 0; t < Tp; ++t) {
        double acc = bias[o];
        for (int64_t c = 0; c < C; ++c) {
          for (int64_t j = 0; j < K; ++j) {
            acc += w[(o * C + c) * K + j] * x[(b * C + c) * T + t * stride + j];
          }
        }
        y[(b * O + o) * Tp + t] = acc;
      }
    }
  }
  return y;
}

// Scalar GRU reference with gate order r, z, n and h0 = 0.
std::vector<double> gru_ref(const std::vector<double>& x, int64_t B, int64_t T,
                            int64_t in, int64_t H, const std::vector<double>& wx,
                            const std::vector<double>& bx, const std::vector<double>& wh,
                            const std::vector<double>& bh) {
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> out(static_cast<size_t>(B * T * H));
  for (int64_t b = 0; b < B; ++b) {
    std::vector<double> h(static_cast<size_t>(H), 0.0);
    for (int64_t t = 0; t < T; ++t) {
      std::vector<double> xp(3 * H, 0.0), hp(3 * H, 0.0);
      for (int64_t g = 0; g < 3 * H; ++g) {
        xp[g] = bx[g];
        hp[g] = bh[g];
        for (int64_t j = 0; j < in; ++j) xp[g] += x[(b * T + t) * in + j] * wx[j * 3 * H + g];
        for (int64_t j = 0; j < H; ++j) hp[g] += h[j] * wh[j * 3 * H + g];
      }
      for (int64_t i = 0; i < H; ++i) {
        double r = sig(xp[i] + hp[i]);
        double z = sig(xp[H + i] + hp[H + i]);
        double n = std::tanh(xp[2 * H + i] + r * hp[2 * H + i]);
        h[i] = (1.0 - z) * n + z * h[i];
        out[(b * T + t) * H + i] = h[i];
      }
    }
  }
  return out;
}

Tensor random_tensor(Rng& rng, slil::Shape shape, bool grad = false) {
  std::vector<double> v(static_cast<size_t>(slil::numel(shape)));
  for (double& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

TEST(Init, UniformBoundsRespectFanIn) {
  Rng rng{7};
  Tensor w = slil::uniform_init(rng, {50, 20}, 50);
  double bound = 1.0 / std::sqrt(50.0);
  double lo = 0, hi = 0;
  for (double v : w.data()) {
    EXPECT_LE(std::abs(v), bound);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_LT(lo, -0.5 * bound);  // spread actually fills the range
  EXPECT_GT(hi, 0.5 * bound);
  EXPECT_TRUE(w.requires_grad());
}

TEST(LinearLayer, MatchesManualAffine) {
  Rng rng{1};
  slil::Linear lin(rng, 3, 2);
  Tensor x = random_tensor(rng, {4, 3});
  Tensor y = lin.forward(x);
  EXPECT_EQ(y.shape(), (slil::Shape{4, 2}));
  double manual = 0.0;
  for (int j = 0; j < 3; ++j) manual += x.at({1, j}) * lin.w.at({j, 0});
  manual += lin.b.data()[0];
  EXPECT_NEAR(y.at({1, 0}), manual, 1e-12);

  Tensor x3 = random_tensor(rng, {2, 5, 3});
  EXPECT_EQ(lin.forward(x3).shape(), (slil::Shape{2, 5, 2}));
  EXPECT_THROW(lin.forward(random_tensor(rng, {4, 4})), slil::ShapeError);
}

TEST(LinearLayer, GradientsMatchFiniteDifferences) {
  Rng rng{2};
  slil::Linear lin(rng, 3, 2);
  Tensor x = random_tensor(rng, {4, 3}, true);
  auto build = [&]() { return mean_all(mul(lin.forward(x), lin.forward(x))); };
  EXPECT_LT(oracle::grad_check({lin.w, lin.b, x}, build), 1e-6);
}

TEST(ConvLayer, MatchesDirectConvolution) {
  Rng rng{3};
  for (int64_t stride : {1, 2}) {
    slil::Conv1d conv(rng, 2, 3, 3, stride);
    Tensor x = random_tensor(rng, {2, 2, 9});
    Tensor y = conv.forward(x);
    int64_t Tp = (9 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (slil::Shape{2, 3, Tp}));
    auto ref = conv_ref({x.data().begin(), x.data().end()}, 2, 2, 9,
                        {conv.w.data().begin(), conv.w.data().end()},
                        {conv.b.data().begin(), conv.b.data().end()}, 3, 3, stride);
    for (int64_t i = 0; i < y.size(); ++i) {
      EXPECT_NEAR(y.data()[i], ref[static_cast<size_t>(i)], 1e-12);
    }
  }
}

TEST(ConvLayer, LengthArithmeticAndErrors) {
  Rng rng{4};
  slil::Conv1d conv(rng, 1, 1, 3, 2);
  EXPECT_EQ(conv.out_length(3), 1);
  EXPECT_EQ(conv.out_length(4), 1);
  EXPECT_EQ(conv.out_length(5), 2);
  EXPECT_THROW(conv.out_length(2), slil::ShapeError);
  EXPECT_THROW(conv.forward(random_tensor(rng, {1, 2, 5})), slil::ShapeError);
}

TEST(ConvLayer, GradientsMatchFiniteDifferences) {
  Rng rng{5};
  slil::Conv1d conv(rng, 2, 2, 2, 2);
  Tensor x = random_tensor(rng, {2, 2, 6}, true);
  auto build = [&]() {
    Tensor y = conv.forward(x);
    return mean_all(mul(y, y));
  };
  EXPECT_LT(oracle::grad_check({conv.w, conv.b, x}, build), 1e-6);
}

TEST(BatchNorm, NormalizesPerChannelInTraining) {
  Rng rng{6};
  slil::BatchNorm1d bn(3);
  Tensor x = random_tensor(rng, {4, 3, 5});
  Tensor y = bn.forward(x, /*training=*/true);
  for (int64_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (int64_t b = 0; b < 4; ++b) {
      for (int64_t t = 0; t < 5; ++t) {
        double v = y.at({b, c, t});
        s += v;
        s2 += v * v;
      }
    }
    double m = s / 20.0, var = s2 / 20.0 - m * m;
    EXPECT_NEAR(m, 0.0, 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-3);  // eps keeps it a hair under 1
  }
}

TEST(BatchNorm, TrainingRequiresBatchOfTwo) {
  Rng rng{7};
  slil::BatchNorm1d bn(2);
  Tensor x = random_tensor(rng, {1, 2, 4});
  EXPECT_THROW(bn.forward(x, true), slil::ShapeError);
  EXPECT_NO_THROW(bn.forward(x, false));
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  Rng rng{8};
  slil::BatchNorm1d bn(2);
  Tensor x = random_tensor(rng, {4, 2, 3});
  bn.forward(x, true);
  EXPECT_NE(bn.running_mean[0], 0.0);
  // With momentum 0.1 and one update: running = 0.9*init + 0.1*batch.
  double s = 0;
  for (int64_t b = 0; b < 4; ++b) {
    for (int64_t t = 0; t < 3; ++t) s += x.at({b, 0, t});
  }
  EXPECT_NEAR(bn.running_mean[0], 0.1 * s / 12.0, 1e-12);

  // Eval output is an affine map using the running buffers, not batch stats.
  Tensor e = bn.forward(x, false);
  double expect = (x.at({0, 0, 0}) - bn.running_mean[0]) /
                  std::sqrt(bn.running_var[0] + bn.eps);
  EXPECT_NEAR(e.at({0, 0, 0}), expect, 1e-12);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  Rng rng{9};
  slil::BatchNorm1d bn(2);
  Tensor x = random_tensor(rng, {3, 2, 4}, true);
  // A plain mean of squares is invariant to the normalization (gradient wrt
  // x collapses to ~0 and finite differences only see roundoff), so weight
  // the outputs with fixed random coefficients instead.
  Tensor c = random_tensor(rng, {3, 2, 4});
  auto build = [&]() {
    // Fresh running buffers each evaluation keep the loss a pure function.
    slil::BatchNorm1d probe(2);
    probe.gamma = bn.gamma;
    probe.beta = bn.beta;
    Tensor y = probe.forward(x, true);
    return mean_all(mul(add(y, mul(y, y)), c));
  };
  EXPECT_LT(oracle::grad_check({bn.gamma, bn.beta, x}, build), 1e-6);
}

TEST(GruLayer, MatchesScalarReference) {
  Rng rng{10};
  slil::GruDirection gru(rng, 3, 4);
  Tensor x = random_tensor(rng, {2, 5, 3});
  Tensor y = gru.run(x);
  ASSERT_EQ(y.shape(), (slil::Shape{2, 5, 4}));
  auto ref = gru_ref({x.data().begin(), x.data().end()}, 2, 5, 3, 4,
                     {gru.wx.data().begin(), gru.wx.data().end()},
                     {gru.bx.data().begin(), gru.bx.data().end()},
                     {gru.wh.data().begin(), gru.wh.data().end()},
                     {gru.bh.data().begin(), gru.bh.data().end()});
  for (int64_t i = 0; i < y.size(); ++i) {
    EXPECT_NEAR(y.data()[i], ref[static_cast<size_t>(i)], 1e-12);
  }
}

TEST(GruLayer, GradientsThroughTimeMatchFiniteDifferences) {
  Rng rng{11};
  slil::GruLayer gru(rng, 2, 3, /*bidir=*/false);
  Tensor x = random_tensor(rng, {2, 4, 2}, true);
  auto build = [&]() {
    Tensor y = gru.forward(x);
    return mean_all(mul(y, y));
  };
  std::vector<Tensor> params = gru.parameters();
  params.push_back(x);
  EXPECT_LT(oracle::grad_check(params, build), 1e-6);
}

TEST(GruLayer, BidirectionalConcatenatesBothPasses) {
  Rng rng{12};
  slil::GruLayer bi(rng, 2, 3, /*bidir=*/true);
  Tensor x = random_tensor(rng, {2, 4, 2});
  Tensor y = bi.forward(x);
  ASSERT_EQ(y.shape(), (slil::Shape{2, 4, 6}));
  EXPECT_EQ(bi.out_channels(), 6);
  EXPECT_EQ(bi.parameters().size(), 8u);

  // Forward half equals the unidirectional run; backward half equals a run
  // on the time-reversed input, re-reversed.
  Tensor f = bi.fwd.run(x);
  Tensor r = flip(bi.bwd.run(flip(x, 1)), 1);
  for (int64_t b = 0; b < 2; ++b) {
    for (int64_t t = 0; t < 4; ++t) {
      for (int64_t h = 0; h < 3; ++h) {
        EXPECT_EQ(y.at({b, t, h}), f.at({b, t, h}));
        EXPECT_EQ(y.at({b, t, 3 + h}), r.at({b, t, h}));
      }
    }
  }
}

TEST(GruLayer, BidirectionalGradientsMatchFiniteDifferences) {
  Rng rng{13};
  slil::GruLayer bi(rng, 2, 2, true);
  Tensor x = random_tensor(rng, {1, 3, 2}, true);
  auto build = [&]() {
    Tensor y = bi.forward(x);
    return mean_all(mul(y, y));
  };
  std::vector<Tensor> params = bi.parameters();
  params.push_back(x);
  EXPECT_LT(oracle::grad_check(params, build), 1e-6);
}

TEST(Dropout, IdentityWhenEvalOrZero) {
  Rng rng{14};
  Tensor x = random_tensor(rng, {3, 4});
  Tensor e = slil::dropout(x, 0.5, rng, /*training=*/false);
  Tensor z = slil::dropout(x, 0.0, rng, /*training=*/true);
  for (int64_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(e.data()[i], x.data()[i]);
    EXPECT_EQ(z.data()[i], x.data()[i]);
  }
  EXPECT_THROW(slil::dropout(x, 1.0, rng, true), slil::ConfigError);
}

TEST(Dropout, ScalesKeptUnitsAndIsSeedDeterministic) {
  Rng a{15}, b{15};
  Tensor x = Tensor::full({100}, 1.0);
  Tensor ya = slil::dropout(x, 0.25, a, true);
  Tensor yb = slil::dropout(x, 0.25, b, true);
  int kept = 0;
  for (int64_t i = 0; i < 100; ++i) {
    EXPECT_EQ(ya.data()[i], yb.data()[i]);
    EXPECT_TRUE(ya.data()[i] == 0.0 || std::abs(ya.data()[i] - 4.0 / 3.0) < 1e-12);
    kept += ya.data()[i] != 0.0;
  }
  EXPECT_GT(kept, 50);
  EXPECT_LT(kept, 95);
}

TEST(Params, CountsAndAppends) {
  Rng rng{16};
  slil::Linear lin(rng, 3, 2);
  slil::Conv1d conv(rng, 2, 3, 3, 1);
  std::vector<Tensor> all;
  slil::append_params(all, lin.parameters());
  slil::append_params(all, conv.parameters());
  EXPECT_EQ(all.size(), 4u);
  EXPECT_EQ(slil::param_count(lin.parameters()), 3 * 2 + 2);
  EXPECT_EQ(slil::param_count(conv.parameters()), 3 * 2 * 3 + 3);
}

}  // namespace
