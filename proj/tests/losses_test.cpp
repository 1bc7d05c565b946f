#include "slil/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "slil/random.hpp"

using slil::Rng;
using slil::Tensor;

namespace {

Tensor random_log_probs(Rng& rng, int64_t rows, int64_t cols, bool grad = false) {
  std::vector<double> v(static_cast<size_t>(rows * cols));
  for (double& x : v) x = rng.normal();
  Tensor logits = Tensor::from({rows, cols}, std::move(v), grad);
  return log_softmax(logits);
}

std::vector<int> random_target(Rng& rng, int64_t len, int64_t V) {
  std::vector<int> t(static_cast<size_t>(len));
  for (int& x : t) x = 1 + static_cast<int>(rng.below(V - 1));
  return t;
}

TEST(VocabularyTest, BlankAndUnkReserved) {
  auto v = slil::Vocabulary::build({"a0", "a1", "s0"});
  EXPECT_EQ(v.size(), 5);
  EXPECT_EQ(v.blank(), 0);
  EXPECT_EQ(v.token(0), "<blank>");
  EXPECT_EQ(v.token(1), "<unk>");
  EXPECT_EQ(v.id("a1"), 3);
  EXPECT_EQ(v.id("nonexistent"), v.unk());
  EXPECT_EQ(v.token(v.id("s0")), "s0");
  EXPECT_THROW(v.token(5), slil::ConfigError);
  EXPECT_THROW(slil::Vocabulary::build({"a0", "a0"}), slil::ConfigError);
}

TEST(CeLoss, PerfectPredictionIsZero) {
  // Rows must be normalized; a near-one-hot normalized prediction has loss
  // close to 0, exactly -log(q) for q -> 1.
  std::vector<double> row = {std::log(1.0 - 2e-12), std::log(1e-12), std::log(1e-12)};
  Tensor lp = Tensor::from({1, 3}, row);
  EXPECT_NEAR(ce_loss(lp, {0}).value(), 0.0, 1e-10);
}

TEST(CeLoss, UniformPredictionIsLogD) {
  Tensor lp = Tensor::full({2, 3}, std::log(1.0 / 3.0));
  EXPECT_NEAR(ce_loss(lp, {1, 2}).value(), std::log(3.0), 1e-12);
}

TEST(CeLoss, ValidatesRowsAndTargets) {
  Tensor bad = Tensor::full({1, 3}, std::log(0.5));
  EXPECT_THROW(ce_loss(bad, {0}), slil::NumericError);
  Tensor ok = Tensor::full({1, 3}, std::log(1.0 / 3.0));
  EXPECT_THROW(ce_loss(ok, {3}), slil::ConfigError);
  EXPECT_THROW(ce_loss(ok, {-1}), slil::ConfigError);
  EXPECT_THROW(ce_loss(ok, {0, 1}), slil::ShapeError);
}

TEST(CeLoss, GradientIsSoftmaxMinusOneHot) {
  Rng rng{1};
  std::vector<double> lv(6);
  for (double& x : lv) x = rng.normal();
  Tensor logits = Tensor::from({2, 3}, lv, true);
  std::vector<int> targets = {2, 0};
  slil::Tape tape;
  Tensor loss;
  {
    slil::TapeScope scope(tape);
    loss = ce_loss(log_softmax(logits), targets);
  }
  backward(loss);
  for (int64_t b = 0; b < 2; ++b) {
    double denom = 0;
    for (int64_t d = 0; d < 3; ++d) denom += std::exp(lv[static_cast<size_t>(b * 3 + d)]);
    for (int64_t d = 0; d < 3; ++d) {
      double soft = std::exp(lv[static_cast<size_t>(b * 3 + d)]) / denom;
      double expect = (soft - (targets[static_cast<size_t>(b)] == d)) / 2.0;
      EXPECT_NEAR(logits.grad()[static_cast<size_t>(b * 3 + d)], expect, 1e-12);
    }
  }
}

TEST(CeLoss, GradientMatchesFiniteDifferences) {
  Rng rng{2};
  std::vector<double> lv(12);
  for (double& x : lv) x = rng.normal();
  Tensor logits = Tensor::from({4, 3}, lv, true);
  auto build = [&]() { return ce_loss(log_softmax(logits), {0, 2, 1, 1}); };
  EXPECT_LT(oracle::grad_check({logits}, build), 1e-6);
}

TEST(CtcLoss, SingleFrameSinglePath) {
  Rng rng{3};
  Tensor lp = random_log_probs(rng, 1, 4);
  Tensor loss = ctc_loss(lp, {2});
  EXPECT_NEAR(loss.value(), -lp.at({0, 2}), 1e-12);
}

TEST(CtcLoss, TwoFrameThreePathSum) {
  Rng rng{4};
  Tensor lp = random_log_probs(rng, 2, 3);
  // Paths for target [k] with T=2: (blank,k), (k,blank), (k,k).
  int k = 2;
  double p = std::exp(lp.at({0, 0}) + lp.at({1, k})) +
             std::exp(lp.at({0, k}) + lp.at({1, 0})) +
             std::exp(lp.at({0, k}) + lp.at({1, k}));
  EXPECT_NEAR(ctc_loss(lp, {k}).value(), -std::log(p), 1e-10);
}

TEST(CtcLoss, EmptyTargetIsAllBlankPath) {
  Rng rng{5};
  Tensor lp = random_log_probs(rng, 4, 3);
  double expect = 0;
  for (int64_t t = 0; t < 4; ++t) expect -= lp.at({t, 0});
  EXPECT_NEAR(ctc_loss(lp, {}).value(), expect, 1e-12);
}

TEST(CtcLoss, MinimumFrameArithmetic) {
  EXPECT_EQ(slil::ctc_min_frames({}), 0);
  EXPECT_EQ(slil::ctc_min_frames({1, 2, 3}), 3);
  EXPECT_EQ(slil::ctc_min_frames({1, 1}), 3);
  EXPECT_EQ(slil::ctc_min_frames({2, 2, 2}), 5);
  EXPECT_EQ(slil::ctc_min_frames({1, 1, 2, 2}), 6);
}

TEST(CtcLoss, InfeasibleAndInvalidTargetsError) {
  Rng rng{6};
  Tensor lp = random_log_probs(rng, 2, 4);
  EXPECT_THROW(ctc_loss(lp, {1, 2, 3}), slil::InfeasibleTargetError);
  EXPECT_THROW(ctc_loss(lp, {1, 1}), slil::InfeasibleTargetError);
  EXPECT_THROW(ctc_loss(lp, {0}), slil::ConfigError);   // blank in target
  EXPECT_THROW(ctc_loss(lp, {4}), slil::ConfigError);   // out of vocabulary
  EXPECT_NO_THROW(ctc_loss(lp, {1, 2}));
}

TEST(CtcLoss, MatchesBruteForceEnumeration) {
  Rng rng{7};
  int instances = 0;
  while (instances < 200) {
    int64_t V = 2 + rng.below(3);       // 2..4
    int64_t m = rng.below(4);           // 0..3
    std::vector<int> target = random_target(rng, m, V);
    int64_t min_t = slil::ctc_min_frames(target);
    if (min_t > 8) continue;
    int64_t T = min_t + rng.below(9 - min_t);
    if (T < 1) T = 1;
    Tensor lp = random_log_probs(rng, T, V);
    double dp = ctc_loss(lp, target).value();
    double brute = oracle::ctc_brute_force_nll(
        {lp.data().begin(), lp.data().end()}, T, V, target);
    ASSERT_NEAR(dp, brute, 1e-8) << "T=" << T << " V=" << V << " m=" << m;
    ++instances;
  }
}

TEST(CtcLoss, GradientMatchesFiniteDifferencesDirect) {
  Rng rng{8};
  for (int i = 0; i < 10; ++i) {
    int64_t V = 3 + rng.below(2);
    std::vector<int> target = random_target(rng, 1 + rng.below(3), V);
    int64_t T = slil::ctc_min_frames(target) + rng.below(3) + 1;
    if (T > 6) T = 6;
    std::vector<double> v(static_cast<size_t>(T * V));
    for (double& x : v) x = rng.normal();
    Tensor lp = Tensor::from({T, V}, v, true);
    // ctc_loss treats its input as free log scores, so it can be probed as a
    // leaf directly.
    EXPECT_LT(oracle::grad_check({lp}, [&]() { return ctc_loss(lp, target); }), 1e-6);
  }
}

TEST(CtcLoss, GradientMatchesFiniteDifferencesThroughSoftmax) {
  Rng rng{9};
  for (int i = 0; i < 5; ++i) {
    std::vector<double> v(5 * 4);
    for (double& x : v) x = rng.normal();
    Tensor logits = Tensor::from({5, 4}, v, true);
    std::vector<int> target = random_target(rng, 2, 4);
    auto build = [&]() { return ctc_loss(log_softmax(logits), target); };
    EXPECT_LT(oracle::grad_check({logits}, build), 1e-6);
  }
}

TEST(CtcLoss, DeterministicAcrossRuns) {
  Rng rng{10};
  Tensor lp = random_log_probs(rng, 6, 4);
  double a = ctc_loss(lp, {1, 2, 1}).value();
  double b = ctc_loss(lp, {1, 2, 1}).value();
  EXPECT_EQ(a, b);
}

TEST(Collapse, CanonicalSentences) {
  // X=1, Y=2, Z=3, blank=0.
  EXPECT_EQ(slil::ctc_collapse({1, 0, 2, 2, 0, 3}), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(slil::ctc_collapse({0, 1, 2, 0, 3, 0}), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(slil::ctc_collapse({0, 0, 0}), (std::vector<int>{}));
  EXPECT_EQ(slil::ctc_collapse({}), (std::vector<int>{}));
  // Repeats merge before blank removal: "a a _ a" -> "a a".
  EXPECT_EQ(slil::ctc_collapse({1, 1, 0, 1}), (std::vector<int>{1, 1}));
}

TEST(Collapse, MatchesOracleOnRandomPaths) {
  Rng rng{11};
  for (int i = 0; i < 500; ++i) {
    int64_t T = 1 + rng.below(12);
    std::vector<int> path(static_cast<size_t>(T));
    for (int& p : path) p = static_cast<int>(rng.below(4));
    EXPECT_EQ(slil::ctc_collapse(path), oracle::collapse_ref(path));
  }
}

TEST(Collapse, FixesBlankFreeRepeatFreeSequences) {
  // Blank separators survive as real repeats ("2 0 2" -> "2 2"), so collapse
  // is only a fixed point on inputs that are already blank- and repeat-free.
  Rng rng{14};
  for (int i = 0; i < 200; ++i) {
    std::vector<int> seq;
    int prev = 0;
    int64_t len = rng.below(8);
    for (int64_t j = 0; j < len; ++j) {
      int tok = 1 + static_cast<int>(rng.below(4));
      if (tok == prev) tok = tok % 4 + 1;
      seq.push_back(tok);
      prev = tok;
    }
    EXPECT_EQ(slil::ctc_collapse(seq), seq);
  }
}

TEST(GreedyDecode, PeakedMatrixRecoversTarget) {
  // Alignment 1,1,0,2,3,0 peaked at 0.9-ish mass.
  std::vector<int> align = {1, 1, 0, 2, 3, 0};
  std::vector<double> v;
  for (int a : align) {
    for (int k = 0; k < 4; ++k) v.push_back(k == a ? std::log(0.91) : std::log(0.03));
  }
  Tensor lp = Tensor::from({6, 4}, v);
  EXPECT_EQ(slil::greedy_decode(lp), (std::vector<int>{1, 2, 3}));
}

TEST(GreedyDecode, UniformTiesPickBlank) {
  Tensor lp = Tensor::full({5, 4}, std::log(0.25));
  EXPECT_EQ(slil::greedy_decode(lp), (std::vector<int>{}));
}

TEST(GreedyDecode, MatchesIndependentRecomputation) {
  Rng rng{12};
  for (int i = 0; i < 50; ++i) {
    Tensor lp = random_log_probs(rng, 8, 5);
    std::vector<int> path;
    for (int64_t t = 0; t < 8; ++t) {
      int best = 0;
      for (int k = 1; k < 5; ++k) {
        if (lp.at({t, k}) > lp.at({t, best})) best = k;
      }
      path.push_back(best);
    }
    EXPECT_EQ(slil::greedy_decode(lp), oracle::collapse_ref(path));
  }
}

TEST(Cer, EdgeValues) {
  EXPECT_EQ(slil::cer({1, 2, 3}, {1, 2, 3}), 0.0);
  EXPECT_EQ(slil::cer({}, {1, 2, 3, 4}), 1.0);
  EXPECT_THROW(slil::cer({1}, {}), slil::ConfigError);
  // Hypothesis longer than reference can push CER above 1.
  EXPECT_GT(slil::cer({1, 2, 3, 4, 5}, {9}), 1.0);
}

TEST(Cer, MatchesQuadraticOracle) {
  Rng rng{13};
  for (int i = 0; i < 300; ++i) {
    std::vector<int> hyp(static_cast<size_t>(rng.below(10)));
    std::vector<int> ref(static_cast<size_t>(1 + rng.below(10)));
    for (int& x : hyp) x = static_cast<int>(rng.below(5));
    for (int& x : ref) x = static_cast<int>(rng.below(5));
    int64_t d = slil::edit_distance(hyp, ref);
    EXPECT_EQ(d, oracle::edit_distance_ref(hyp, ref));
    EXPECT_EQ(d, slil::edit_distance(ref, hyp));  // distance is symmetric
    EXPECT_EQ(slil::cer(hyp, ref), static_cast<double>(d) / ref.size());
  }
}

}  // namespace
