#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "medblip/ndiff/checkpoint.hpp"
#include "medblip/ndiff/gradcheck.hpp"
#include "medblip/ndiff/init.hpp"
#include "medblip/ndiff/ops.hpp"
#include "medblip/ndiff/optim.hpp"
#include "test_util.hpp"

namespace nd = medblip::nd;
using medblip::test::probe;
using medblip::test::random_tensor;
using medblip::test::TempDir;
using nd::Tensor;
using nd::Var;

namespace {

Var<double> leaf(Tensor<double> t) { return Var<double>(std::move(t), true); }

double run_check(nd::ParamStore<double>& store, const nd::LossFn& fn) {
  return nd::finite_difference_check(fn, store).max_relative_error;
}

constexpr int kSeeds = 20;

}  // namespace

TEST(Primitives, SoftmaxOfZeros) {
  Var<double> y = nd::softmax(Var<double>(Tensor<double>({2})), 0);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Primitives, MatmulOfOnes) {
  Var<double> y = nd::matmul(Var<double>(Tensor<double>({2, 3}, 1.0)), Var<double>(Tensor<double>({3, 2}, 1.0)));
  ASSERT_EQ(y.shape(), (nd::Shape{2, 2}));
  for (double v : y.value().data()) EXPECT_EQ(v, 3.0);
}

TEST(Primitives, GeluMatchesErfOracle) {
  const long double x = 1.0L;
  const long double expected = 0.5L * x * (1.0L + std::erf(x / std::sqrt(2.0L)));
  Var<double> y = nd::gelu(Var<double>(Tensor<double>::scalar(1.0)));
  EXPECT_NEAR(y.value().item(), static_cast<double>(expected), 1e-6);
  EXPECT_NEAR(y.value().item(), 0.8413447460685429, 1e-12);
}

TEST(Primitives, ShapeMismatchNamesPrimitiveAndShapes) {
  Var<double> a(Tensor<double>({2, 3}));
  Var<double> b(Tensor<double>({2, 3}));
  try {
    nd::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const medblip::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(nd::add(Var<double>(Tensor<double>({2, 3})), Var<double>(Tensor<double>({4}))), medblip::ShapeError);
}

TEST(Primitives, NonFiniteOutputIsAnError) {
  EXPECT_THROW(nd::log(Var<double>(Tensor<double>::scalar(0.0))), medblip::NumericError);
  EXPECT_THROW(nd::exp(Var<double>(Tensor<double>::scalar(1e6))), medblip::NumericError);
}

TEST(Primitives, MaxReturnsLowestArgmaxOnTies) {
  Var<double> x(Tensor<double>({2, 3}, {1, 5, 5, 2, 0, 2}));
  auto r = nd::max(x, 1);
  EXPECT_EQ(r.value.value()[0], 5.0);
  EXPECT_EQ(r.argmax, (std::vector<std::size_t>{1, 0}));
}

TEST(Primitives, CrossEntropyMasksRows) {
  Tensor<double> logits({2, 3}, {0, 0, 0, 5, 1, 1});
  std::vector<int> targets{1, 0};
  std::vector<std::uint8_t> mask{1, 0};
  Var<double> l = nd::cross_entropy(Var<double>(logits), std::span<const int>(targets),
                                    std::span<const std::uint8_t>(mask));
  EXPECT_NEAR(l.value().item(), std::log(3.0), 1e-12);
}

TEST(Properties, SoftmaxRowsSumToOne) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Tensor<double> x = random_tensor({3, 4, 5}, seed, 4.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Var<double> s = nd::sum(nd::softmax(Var<double>(x), axis), axis);
      for (double v : s.value().data()) EXPECT_NEAR(v, 1.0, 1e-6);
    }
  }
}

TEST(Properties, LayernormMeanAndVariance) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Tensor<double> x = random_tensor({4, 16}, seed, 3.0);
    Var<double> y = nd::layernorm(Var<double>(x), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < 16; ++c) m += y.value()[r * 16 + c];
      m /= 16;
      for (std::size_t c = 0; c < 16; ++c) v += std::pow(y.value()[r * 16 + c] - m, 2);
      v /= 16;
      EXPECT_LT(std::abs(m), 1e-6);
      EXPECT_NEAR(v, 1.0, 1e-4);
    }
  }
}

TEST(Properties, ForwardIsBitDeterministic) {
  Tensor<double> a = random_tensor({3, 4}, 1), b = random_tensor({4, 5}, 2);
  Var<double> y1 = nd::softmax(nd::gelu(nd::matmul(Var<double>(a), Var<double>(b))), 1);
  Var<double> y2 = nd::softmax(nd::gelu(nd::matmul(Var<double>(a), Var<double>(b))), 1);
  EXPECT_TRUE(y1.value() == y2.value());
}

// Every primitive against central differences at random points, 20 seeds.
class PrimitiveGrad : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGrad, Matmul) {
  const int seed = GetParam();
  nd::ParamStore<double> s;
  s.add("a", random_tensor({2, 3, 4}, seed));
  s.add("b", random_tensor({4, 2}, seed + 100));
  s.add("c", random_tensor({2, 12}, seed + 200));
  EXPECT_LT(run_check(s, [&](nd::ParamScope<double>& p) {
              Var<double> batched = nd::matmul(p("a"), nd::transpose(nd::reshape(p("c"), {2, 3, 4})));
              return nd::add(probe(nd::matmul(p("a"), p("b")), seed), probe(batched, seed + 1));
            }),
            1e-4);
}

TEST_P(PrimitiveGrad, ElementwiseAndBroadcast) {
  const int seed = GetParam();
  nd::ParamStore<double> s;
  s.add("a", random_tensor({3, 4}, seed));
  s.add("b", random_tensor({4}, seed + 1));
  s.add("c", random_tensor({3, 1}, seed + 2));
  EXPECT_LT(run_check(s, [&](nd::ParamScope<double>& p) {
              Var<double> y = nd::mul(nd::sub(nd::add(p("a"), p("b")), p("c")), p("a"));
              y = nd::add(nd::scale(y, -1.7), nd::broadcast_to(p("c"), {3, 4}));
              return probe(y, seed);
            }),
            1e-4);
}

TEST_P(PrimitiveGrad, LayoutOps) {
  const int seed = GetParam();
  nd::ParamStore<double> s;
  s.add("a", random_tensor({2, 3, 4}, seed));
  s.add("b", random_tensor({2, 2, 4}, seed + 1));
  EXPECT_LT(run_check(s, [&](nd::ParamScope<double>& p) {
              Var<double> y = nd::concat<double>({p("a"), p("b")}, 1);
              y = nd::slice(nd::transpose(y, {2, 0, 1}), 2, 1, 3);
              return probe(nd::reshape(y, {8, 3}), seed);
            }),
            1e-4);
}

TEST_P(PrimitiveGrad, SoftmaxLayernormGelu) {
  const int seed = GetParam();
  nd::ParamStore<double> s;
  s.add("a", random_tensor({3, 5}, seed, 2.0));
  EXPECT_LT(run_check(s, [&](nd::ParamScope<double>& p) {
              return nd::add(nd::add(probe(nd::softmax(p("a"), 1), seed), probe(nd::softmax(p("a"), 0), seed + 1)),
                             nd::add(probe(nd::layernorm(p("a"), 1), seed + 2), probe(nd::gelu(p("a")), seed + 3)));
            }),
            1e-4);
}

TEST_P(PrimitiveGrad, ExpLog) {
  const int seed = GetParam();
  nd::ParamStore<double> s;
  Tensor<double> pos = random_tensor({6}, seed);
  for (double& v : pos.storage()) v = 0.5 + std::abs(v);
  s.add("a", pos);
  EXPECT_LT(run_check(s, [&](nd::ParamScope<double>& p) {
              return nd::add(probe(nd::exp(p("a")), seed), probe(nd::log(p("a")), seed + 1));
            }),
            1e-4);
}

TEST_P(PrimitiveGrad, EmbeddingAndMaskedFill) {
  const int seed = GetParam();
  nd::ParamStore<double> s;
  s.add("table", random_tensor({5, 3}, seed));
  std::vector<int> ids{4, 0, 4, 2};
  nd::Mask mask{{2, 3}, {0, 1, 0, 1, 0, 0}};
  EXPECT_LT(run_check(s, [&](nd::ParamScope<double>& p) {
              Var<double> e = nd::embedding(p("table"), std::span<const int>(ids), {2, 2});
              return probe(nd::masked_fill(e, mask, -3.0), seed);
            }),
            1e-4);
}

TEST_P(PrimitiveGrad, CrossEntropy) {
  const int seed = GetParam();
  nd::ParamStore<double> s;
  s.add("logits", random_tensor({4, 6}, seed, 2.0));
  std::vector<int> targets{1, 5, 0, 3};
  std::vector<std::uint8_t> mask{1, 0, 1, 1};
  EXPECT_LT(run_check(s, [&](nd::ParamScope<double>& p) {
              return nd::cross_entropy(p("logits"), std::span<const int>(targets),
                                       std::span<const std::uint8_t>(mask));
            }),
            1e-4);
}

TEST_P(PrimitiveGrad, CosineMaxMeanSum) {
  const int seed = GetParam();
  nd::ParamStore<double> s;
  s.add("a", random_tensor({3, 4, 5}, seed));
  s.add("b", random_tensor({3, 4, 5}, seed + 1));
  EXPECT_LT(run_check(s, [&](nd::ParamScope<double>& p) {
              Var<double> c = nd::cosine_similarity(p("a"), p("b"), 2);
              Var<double> m = nd::max(c, 1).value;
              return nd::add(nd::add(probe(m, seed), probe(nd::mean(p("a"), 0), seed + 1)),
                             nd::add(nd::sum(p("b")), nd::mean(p("a"))));
            }),
            1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGrad, ::testing::Range(0, kSeeds));

TEST(Gradients, SumGivesOnes) {
  nd::ParamStore<double> s;
  s.add("p", random_tensor({2, 3, 2}, 5));
  nd::ParamScope<double> scope(s);
  auto g = scope.gradients(nd::sum(scope("p")));
  for (double v : g.at("p").data()) EXPECT_EQ(v, 1.0);
}

TEST(Gradients, HalfSquareGivesIdentity) {
  nd::ParamStore<double> s;
  s.add("p", Tensor<double>({3}, {1, 2, 3}));
  nd::ParamScope<double> scope(s);
  auto g = scope.gradients(nd::scale(nd::sum(nd::mul(scope("p"), scope("p"))), 0.5));
  EXPECT_EQ(g.at("p"), (Tensor<double>({3}, {1, 2, 3})));
}

TEST(Gradients, UnreachableIsZeroAndFrozenAbsent) {
  nd::ParamStore<double> s;
  s.add("used", Tensor<double>({2}, 1.0));
  s.add("unused", Tensor<double>({3}, 1.0));
  s.add("frozen", Tensor<double>({2}, 1.0), true);
  nd::ParamScope<double> scope(s);
  auto g = scope.gradients(nd::sum(nd::mul(scope("used"), scope("frozen"))));
  EXPECT_EQ(g.size(), 2u);
  EXPECT_EQ(g.at("unused"), Tensor<double>({3}));
  EXPECT_EQ(g.count("frozen"), 0u);
}

TEST(Gradients, NonScalarLossIsAnError) {
  nd::ParamStore<double> s;
  s.add("p", Tensor<double>({2}, 1.0));
  nd::ParamScope<double> scope(s);
  EXPECT_THROW(scope.gradients(scope("p")), medblip::Error);
}

TEST(Gradients, NonFiniteGradientNamesParameter) {
  nd::ParamStore<double> s;
  s.add("weird", Tensor<double>::scalar(1.0));
  nd::ParamScope<double> scope(s);
  Var<double> p = scope("weird");
  Var<double> bad = nd::make_result<double>("bad", Tensor<double>::scalar(1.0), {p}, [](nd::Node<double>& n) {
    n.inputs[0]->grad_buffer()[0] += std::numeric_limits<double>::infinity();
  });
  try {
    scope.gradients(bad);
    FAIL() << "expected NumericError";
  } catch (const medblip::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("weird"), std::string::npos) << e.what();
  }
}

TEST(FiniteDifference, QuadraticIsExact) {
  nd::ParamStore<double> s;
  s.add("p", random_tensor({4, 3}, 9));
  double err = run_check(s, [](nd::ParamScope<double>& p) {
    return nd::scale(nd::sum(nd::mul(p("p"), p("p"))), 0.5);
  });
  EXPECT_LT(err, 1e-9);
}

TEST(FiniteDifference, NondeterministicLossIsRejected) {
  nd::ParamStore<double> s;
  s.add("p", Tensor<double>({2}, 1.0));
  int calls = 0;
  EXPECT_THROW(nd::finite_difference_check(
                   [&](nd::ParamScope<double>& p) {
                     ++calls;
                     return nd::scale(nd::sum(p("p")), 1.0 + 1e-3 * calls);
                   },
                   s),
               medblip::Error);
}

TEST(FiniteDifference, WrongBackwardIsCaught) {
  nd::ParamStore<double> s;
  s.add("p", random_tensor({3}, 4));
  double err = run_check(s, [](nd::ParamScope<double>& p) {
    Var<double> x = p("p");
    Tensor<double> v = x.value();
    for (double& e : v.storage()) e = e * e;
    // Backward claims d(x^2)/dx = x.
    Var<double> sq = nd::make_result<double>("bad_square", v, {x}, [](nd::Node<double>& n) {
      auto& in = *n.inputs[0];
      for (std::size_t i = 0; i < in.value.numel(); ++i) in.grad_buffer()[i] += n.grad[i] * in.value[i];
    });
    return nd::sum(sq);
  });
  EXPECT_GT(err, 0.1);
}

TEST(AdamW, ZeroGradZeroDecayIsNoOp) {
  nd::ParamStore<double> s;
  s.add("p", random_tensor({3}, 1));
  const Tensor<double> before = s.value("p");
  nd::AdamW<double> opt({.lr = 0.1, .weight_decay = 0.0});
  opt.step(s, {{"p", Tensor<double>({3})}});
  EXPECT_EQ(s.value("p"), before);
}

TEST(AdamW, SingleStepHandValue) {
  nd::ParamStore<double> s;
  s.add("p", Tensor<double>::scalar(1.0));
  nd::AdamW<double> opt({.lr = 0.1, .beta1 = 0.0, .beta2 = 0.0, .eps = 1e-8, .weight_decay = 0.0});
  opt.step(s, {{"p", Tensor<double>::scalar(1.0)}});
  EXPECT_NEAR(s.value("p").item(), 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)), 1e-15);
  EXPECT_NEAR(s.value("p").item(), 0.9, 1e-8);
}

TEST(AdamW, DecayIsDecoupled) {
  nd::ParamStore<double> s;
  s.add("p", Tensor<double>::scalar(2.0));
  nd::AdamW<double> opt({.lr = 0.1, .weight_decay = 0.5});
  opt.step(s, {{"p", Tensor<double>::scalar(0.0)}});
  // Zero gradient: only p -= lr * wd * p applies.
  EXPECT_NEAR(s.value("p").item(), 2.0 - 0.1 * 0.5 * 2.0, 1e-15);
}

TEST(AdamW, FrozenEntriesSurviveManySteps) {
  nd::ParamStore<double> s;
  s.add("live", random_tensor({4}, 1));
  s.add("cold", random_tensor({4}, 2), true);
  const Tensor<double> cold = s.value("cold");
  nd::AdamW<double> opt;
  for (int i = 0; i < 20; ++i) opt.step(s, {{"live", random_tensor({4}, 100 + i)}});
  EXPECT_EQ(s.value("cold"), cold);
  EXPECT_EQ(opt.steps(), 20u);
  EXPECT_EQ(opt.first_moments().at("live").shape(), (nd::Shape{4}));
}

TEST(AdamW, ContractViolations) {
  nd::ParamStore<double> s;
  s.add("live", Tensor<double>({2}));
  s.add("cold", Tensor<double>({2}), true);
  nd::AdamW<double> opt;
  EXPECT_THROW(opt.step(s, {{"live", Tensor<double>({2})}, {"cold", Tensor<double>({2})}}), medblip::FreezeError);
  EXPECT_THROW(opt.step(s, {}), medblip::Error);
  EXPECT_THROW(opt.step(s, {{"live", Tensor<double>({2})}, {"ghost", Tensor<double>({2})}}), medblip::Error);
}

TEST(ParamStore, OrderAndUniqueness) {
  nd::ParamStore<float> s;
  s.add("b.x", Tensor<float>({1}));
  s.add("a.y", Tensor<float>({2}), true);
  s.add("a.x", Tensor<float>({3}));
  EXPECT_EQ(s.names(), (std::vector<std::string>{"a.x", "a.y", "b.x"}));
  EXPECT_EQ(s.learnable_names(), (std::vector<std::string>{"a.x", "b.x"}));
  EXPECT_EQ(s.total_scalars(), 6u);
  EXPECT_EQ(s.learnable_scalars(), 4u);
  EXPECT_THROW(s.add("a.x", Tensor<float>({3})), medblip::Error);
  EXPECT_THROW(s.assign("a.x", Tensor<float>({4})), medblip::ShapeError);
}

TEST(Init, KeyedByNameNotOrder) {
  auto a = nd::truncated_normal<float>({8, 8}, 0.02, 7, "w");
  nd::truncated_normal<float>({8}, 0.02, 7, "other");
  auto b = nd::truncated_normal<float>({8, 8}, 0.02, 7, "w");
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == nd::truncated_normal<float>({8, 8}, 0.02, 8, "w"));
  for (float v : a.data()) EXPECT_LE(std::abs(v), 0.04f);
}

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

nd::ParamStore<float> sample_store() {
  nd::ParamStore<float> s(0xDEADBEEFCAFEull);
  s.add("a", random_tensor({3, 2}, 1).cast<float>());
  s.add("b.frozen", random_tensor({4}, 2).cast<float>(), true);
  s.add("c", Tensor<float>::scalar(-2.5f));
  return s;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  const auto path = dir.path() / "m.mblp";
  const auto store = sample_store();
  nd::save_checkpoint(store, path);
  auto loaded = nd::load_checkpoint<float>(path);
  EXPECT_TRUE(loaded == store);
  EXPECT_EQ(loaded.rng_seed(), 0xDEADBEEFCAFEull);
  EXPECT_TRUE(loaded.at("b.frozen").frozen);
  const auto again = dir.path() / "again.mblp";
  nd::save_checkpoint(loaded, again);
  EXPECT_EQ(read_bytes(path), read_bytes(again));
}

TEST(Checkpoint, HeaderLayout) {
  TempDir dir;
  const auto path = dir.path() / "m.mblp";
  nd::save_checkpoint(sample_store(), path);
  const std::string bytes = read_bytes(path);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(0, 4), "MBLP");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes.substr(8, 4), std::string("\x0a\0\0\0", 4));
  EXPECT_EQ(bytes.substr(12, 10), nd::kSeedRecord);
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  TempDir dir;
  const auto path = dir.path() / "m.mblp";
  nd::save_checkpoint(sample_store(), path);
  const std::string bytes = read_bytes(path);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    const auto bad = dir.path() / ("cut" + std::to_string(cut));
    std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(cut));
    EXPECT_THROW(nd::load_checkpoint<float>(bad), medblip::FormatError) << cut;
  }
}

TEST(Checkpoint, VersionAndShapeMismatch) {
  TempDir dir;
  const auto path = dir.path() / "m.mblp";
  nd::save_checkpoint(sample_store(), path);
  std::string bytes = read_bytes(path);
  bytes[4] = 9;
  const auto bad = dir.path() / "v9.mblp";
  std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  EXPECT_THROW(nd::load_checkpoint<float>(bad), medblip::FormatError);

  nd::ParamStore<float> other;
  other.add("a", Tensor<float>({2, 3}));
  other.add("b.frozen", Tensor<float>({4}));
  other.add("c", Tensor<float>::scalar(0));
  EXPECT_THROW(nd::load_into(other, path), medblip::Error);
}

TEST(Checkpoint, LoadsIntoOtherPrecision) {
  TempDir dir;
  const auto path = dir.path() / "m.mblp";
  nd::save_checkpoint(sample_store(), path);
  auto wide = nd::load_checkpoint<double>(path);
  EXPECT_EQ(wide.value("c").item(), -2.5);
}
