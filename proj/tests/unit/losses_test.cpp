#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "medblip/losses/objectives.hpp"
#include "medblip/ndiff/gradcheck.hpp"
#include "medblip/ndiff/ops.hpp"
#include "test_util.hpp"

namespace nd = medblip::nd;
namespace losses = medblip::losses;
using medblip::test::random_tensor;
using nd::Tensor;
using nd::Var;

namespace {

Var<double> c(Tensor<double> t) { return Var<double>(std::move(t)); }
Var<double> log_tau(double v) { return c(Tensor<double>::scalar(v)); }

// Joint permutation of the batch axis of a (B, ...) tensor.
Tensor<double> permute_batch(const Tensor<double>& t, const std::vector<std::size_t>& perm) {
  const std::size_t per = t.numel() / t.dim(0);
  Tensor<double> out(t.shape());
  for (std::size_t b = 0; b < perm.size(); ++b)
    std::copy_n(t.data().begin() + perm[b] * per, per, out.storage().begin() + b * per);
  return out;
}

}  // namespace

TEST(PairSimilarity, HandCases) {
  const Tensor<double> t({2}, {0.6, 0.8});
  EXPECT_NEAR(losses::pair_similarity(c(Tensor<double>({1, 2}, {0.6, 0.8})), c(t)).value().item(), 1.0, 1e-15);
  EXPECT_NEAR(losses::pair_similarity(c(Tensor<double>({2, 2}, {0.6, 0.8, -0.6, -0.8})), c(t)).value().item(), 1.0,
              1e-15);
  EXPECT_NEAR(losses::pair_similarity(c(Tensor<double>({2, 2}, {1, 0, 0, 1})), c(t)).value().item(), 0.8, 1e-15);
}

TEST(PairSimilarity, Errors) {
  EXPECT_THROW(losses::pair_similarity(c(Tensor<double>({2, 2})), c(Tensor<double>({2}, {1, 0}))),
               medblip::NumericError);
  EXPECT_THROW(losses::pair_similarity(c(Tensor<double>({2, 3}, 1.0)), c(Tensor<double>({2}, 1.0))),
               medblip::ShapeError);
}

TEST(SimilarityMatrix, EntriesArePairSimilarities) {
  const auto z = random_tensor({3, 4, 5}, 1), t = random_tensor({3, 5}, 2);
  const auto s = losses::similarity_matrix(c(z), c(t)).value();
  ASSERT_EQ(s.shape(), (nd::Shape{3, 3}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      Tensor<double> zi({4, 5}), tj({5});
      std::copy_n(z.data().begin() + i * 20, 20, zi.storage().begin());
      std::copy_n(t.data().begin() + j * 5, 5, tj.storage().begin());
      EXPECT_NEAR(s[i * 3 + j], losses::pair_similarity(c(zi), c(tj)).value().item(), 1e-14);
    }
}

TEST(Itc, SingletonBatchIsZero) {
  const auto l = losses::itc_loss(c(random_tensor({1, 3, 4}, 1)), c(random_tensor({1, 4}, 2)), log_tau(std::log(0.07)));
  EXPECT_EQ(l.value().item(), 0.0);
}

TEST(Itc, TwoByTwoHandCase) {
  const Tensor<double> z({2, 1, 2}, {1, 0, 0, 1}), t({2, 2}, {1, 0, 0, 1});
  const double expected = std::log(1.0 + std::exp(-1.0));
  EXPECT_NEAR(losses::itc_loss(c(z), c(t), log_tau(0.0)).value().item(), expected, 1e-6);
  EXPECT_NEAR(expected, 0.31326, 1e-5);
}

TEST(Itc, SymmetricCrossEntropyIsHalfRowsPlusColumns) {
  const Tensor<double> logits({2, 2}, {2, 0, 1, 0});
  // rows: -ln softmax([2,0])_0, -ln softmax([1,0])_1; columns: [2,1] target 0, [0,0] target 1
  const double rows = (std::log(1 + std::exp(-2.0)) + std::log(1 + std::exp(1.0))) / 2;
  const double cols = (std::log(1 + std::exp(-1.0)) + std::log(2.0)) / 2;
  EXPECT_NEAR(losses::symmetric_cross_entropy(c(logits)).value().item(), (rows + cols) / 2, 1e-14);
  EXPECT_THROW(losses::symmetric_cross_entropy(c(Tensor<double>({2, 3}))), medblip::ShapeError);
}

TEST(Itc, JointPermutationInvariance) {
  for (int seed = 0; seed < 10; ++seed) {
    const auto z = random_tensor({4, 3, 6}, seed), t = random_tensor({4, 6}, seed + 50);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    const double a = losses::itc_loss(c(z), c(t), log_tau(-1.3)).value().item();
    const double b = losses::itc_loss(c(permute_batch(z, perm)), c(permute_batch(t, perm)), log_tau(-1.3)).value().item();
    EXPECT_NEAR(a, b, 1e-6);
  }
}

TEST(Itc, NonNegativeAndVanishesWithDominantDiagonal) {
  for (int seed = 0; seed < 20; ++seed) {
    Tensor<double> logits = random_tensor({5, 5}, seed, 2.0);
    double prev = losses::symmetric_cross_entropy(c(logits)).value().item();
    EXPECT_GE(prev, 0.0);
    for (int k = 0; k < 8; ++k) {
      for (std::size_t i = 0; i < 5; ++i) logits[i * 6] += 4.0;
      const double now = losses::symmetric_cross_entropy(c(logits)).value().item();
      EXPECT_GE(now, 0.0);
      EXPECT_LT(now, prev);
      prev = now;
    }
    EXPECT_LT(prev, 1e-10);
  }
}

TEST(Itc, GradcheckOnThreePairs) {
  nd::ParamStore<double> s;
  s.add("z", random_tensor({3, 2, 4}, 1));
  s.add("t", random_tensor({3, 4}, 2));
  s.add("log_tau", Tensor<double>::scalar(-0.7));
  const auto rep = nd::finite_difference_check(
      [](nd::ParamScope<double>& p) { return losses::itc_loss(p("z"), p("t"), p("log_tau")); }, s);
  EXPECT_LT(rep.max_relative_error, 1e-4);
}

TEST(FeatureAlignment, QaSwitchAndAdditivity) {
  for (int seed = 0; seed < 10; ++seed) {
    const auto z = c(random_tensor({4, 3, 5}, seed)), d = c(random_tensor({4, 5}, seed + 1)),
               q = c(random_tensor({4, 5}, seed + 2));
    const auto lt = log_tau(-2.0);
    const double it = losses::itc_loss(z, d, lt).value().item(), iq = losses::itc_loss(z, q, lt).value().item();
    EXPECT_NEAR(losses::feature_alignment_loss(z, d, q, lt, true).value().item(), it + iq, 1e-7);
    EXPECT_EQ(losses::feature_alignment_loss(z, d, q, lt, false).value().item(), it);
  }
}

TEST(FeatureAlignment, SingletonIsZeroAndMismatchIsAnError) {
  const auto lt = log_tau(-2.0);
  EXPECT_EQ(losses::feature_alignment_loss(c(random_tensor({1, 2, 3}, 1)), c(random_tensor({1, 3}, 2)),
                                           c(random_tensor({1, 3}, 3)), lt)
                .value()
                .item(),
            0.0);
  EXPECT_THROW(losses::feature_alignment_loss(c(random_tensor({3, 2, 3}, 1)), c(random_tensor({3, 3}, 2)),
                                              c(random_tensor({2, 3}, 3)), lt),
               medblip::ShapeError);
}

TEST(Total, Arithmetic) {
  const auto fa = c(Tensor<double>::scalar(0.5)), lg = c(Tensor<double>::scalar(2.0));
  EXPECT_EQ(losses::total_loss(fa, lg, 1.0).value().item(), 2.5);
  EXPECT_EQ(losses::total_loss(fa, lg, 0.0).value().item(), 0.5);
  EXPECT_EQ(losses::total_loss(fa, lg, 0.25).value().item(), 1.0);
}

TEST(Total, GradientSplitsAdditively) {
  nd::ParamStore<double> s;
  s.add("z", random_tensor({3, 2, 4}, 3));
  s.add("t", random_tensor({3, 4}, 4));
  s.add("log_tau", Tensor<double>::scalar(-1.0));
  const double lambda = 0.7;
  auto fa = [](nd::ParamScope<double>& p) { return losses::itc_loss(p("z"), p("t"), p("log_tau")); };
  auto lg = [](nd::ParamScope<double>& p) { return nd::sum(nd::mul(p("z"), p("z"))); };
  nd::ParamScope<double> a(s), b(s), t(s);
  const auto ga = a.gradients(fa(a)), gb = b.gradients(lg(b));
  const auto gt = t.gradients(losses::total_loss(fa(t), lg(t), lambda));
  for (const auto& [name, g] : gt)
    for (std::size_t i = 0; i < g.numel(); ++i)
      EXPECT_NEAR(g[i], ga.at(name)[i] + lambda * gb.at(name)[i], 1e-12) << name;
  const auto rep = nd::finite_difference_check(
      [&](nd::ParamScope<double>& p) { return losses::total_loss(fa(p), lg(p), lambda); }, s);
  EXPECT_LT(rep.max_relative_error, 1e-4);
}
