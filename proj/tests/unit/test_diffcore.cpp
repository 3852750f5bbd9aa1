#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "alft/diffcore/container.hpp"
#include "alft/diffcore/gradcheck.hpp"
#include "alft/diffcore/ops.hpp"
#include "alft/diffcore/optimizer.hpp"
#include "support.hpp"

using namespace alft;
using namespace alft::ad;
using alft::testing::probe;
using alft::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

void expect_grad_ok(const GraphFunction& f, std::vector<Tensor> inputs, double eps = 1e-6) {
  const auto rep = grad_check(f, std::move(inputs), eps);
  EXPECT_LT(rep.max_relative_error, kGradTol) << "worst " << rep.worst << " analytic " << rep.worst_analytic << " numeric "
                                              << rep.worst_numeric;
  EXPECT_GT(rep.coordinates, 0U);
}

}  // namespace

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  Graph g;
  Var x = g.constant(Shape{3, 5}, std::vector<double>(15, 0.0));
  Var y = softmax_rows(x);
  for (double v : y.value()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Primitives, MatmulByIdentity) {
  Rng rng(1);
  Tensor a = random_tensor(rng, Shape{4, 3});
  Graph g;
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  Var y = matmul(g.constant(a), g.constant(Shape{3, 3}, eye));
  for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_EQ(y.value()[i], a.data[i]);
}

TEST(Primitives, ShapeMismatchNamesBothShapes) {
  Graph g;
  Var a = g.constant(Shape{2, 3}, std::vector<double>(6, 1.0));
  Var b = g.constant(Shape{3, 2}, std::vector<double>(6, 1.0));
  try {
    (void)add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[3x2]"), std::string::npos);
  }
}

TEST(Primitives, GuardedLogAndSigmoidStayFinite) {
  Graph g;
  Var x = g.constant(Shape{4}, {0.0, -1e-300, 1e300, -1e300});
  for (double v : log(x).value()) EXPECT_TRUE(std::isfinite(v));
  Var s = sigmoid(g.constant(Shape{2}, {-1e4, 1e4}));
  EXPECT_GT(s.value()[0], 0.0);
  EXPECT_LT(s.value()[1], 1.0);
}

// ---------------------------------------------------------------- finite differences

TEST(GradCheck, QuadraticExample) {
  const auto rep = grad_check([](Graph&, const std::vector<Var>& v) { return sum_all(mul(v[0], v[0])); },
                              {Tensor(Shape{2}, {1.0, 2.0})});
  EXPECT_LT(rep.max_relative_error, 1e-8);
}

TEST(GradCheck, ConstantFunction) {
  const auto rep = grad_check(
      [](Graph& g, const std::vector<Var>& v) { return add(scale(sum_all(v[0]), 0.0), g.constant(Shape{1}, {3.0})); },
      {Tensor(Shape{3}, {1.0, 2.0, 3.0})});
  EXPECT_EQ(rep.max_relative_error, 0.0);
}

TEST(GradCheck, MultistepHandlesInterpolationKinks) {
  Rng rng(41);
  const Tensor vol = alft::testing::random_tensor(rng, Shape{4, 4, 4, 2});
  ParameterStore s;
  s.add("p", Shape{1, 3}).value = {-0.25 + 4e-4, 0.1, 0.3};  // x sits just past a sampling node
  auto f = [&](Graph& g) { return alft::testing::probe(trilinear_sample(g.constant(vol), g.param(s.at("p")), -1.0, 1.0)); };
  EXPECT_GT(grad_check_params(s, f, 1e-3).max_relative_error, 1e-2);
  EXPECT_LT(grad_check_params_multistep(s, f).max_relative_error, 1e-6);
}

TEST(GradCheck, MultistepStillCatchesWrongGradient) {
  ParameterStore s;
  s.add("p", Shape{3}).value = {0.3, -1.2, 2.0};
  // sum x^2 with a backward that is one percent too large
  auto f = [&](Graph& g) {
    Var x = g.param(s.at("p"));
    std::vector<double> xv(x.value().begin(), x.value().end());
    double v = 0.0;
    for (double a : xv) v += a * a;
    const int ix = x.id();
    return g.record(Shape{1}, {v}, {x}, [ix](Graph& gg, int self) {
      const double go = gg.grad(self)[0];
      auto& gx = gg.grad_mut(ix);
      const auto& xv2 = gg.value(ix);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.02 * xv2[i] * go;
    });
  };
  EXPECT_GT(grad_check_params_multistep(s, f).max_relative_error, 5e-3);
}

TEST(GradCheck, NonFiniteValueAborts) {
  EXPECT_THROW(grad_check([](Graph& g, const std::vector<Var>&) { return g.constant(Shape{1}, {std::nan("")}); },
                          {Tensor(Shape{1}, {1.0})}),
               NumericError);
}

TEST(GradCheck, Elementwise) {
  Rng rng(2);
  auto a = random_tensor(rng, Shape{3, 4}), b = random_tensor(rng, Shape{3, 4});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(add(v[0], v[1])); }, {a, b});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(sub(v[0], v[1])); }, {a, b});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(mul(v[0], v[1])); }, {a, b});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(mul(v[0], v[0])); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(scale(v[0], -1.7)); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(gelu(v[0])); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(sigmoid(v[0])); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(log(v[0])); }, {random_tensor(rng, Shape{5}, 0.2, 2.0)});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(add_bias(v[0], v[1])); },
                 {a, random_tensor(rng, Shape{4})});
}

TEST(GradCheck, LinearAlgebra) {
  Rng rng(3);
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(matmul(v[0], v[1])); },
                 {random_tensor(rng, Shape{3, 4}), random_tensor(rng, Shape{4, 2})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(matmul(v[0], v[1])); },
                 {random_tensor(rng, Shape{2, 3, 4}), random_tensor(rng, Shape{4, 5})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(matmul_nt(v[0], v[1])); },
                 {random_tensor(rng, Shape{3, 4}), random_tensor(rng, Shape{5, 4})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(transpose(v[0])); }, {random_tensor(rng, Shape{3, 4})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(linear(v[0], v[1], v[2])); },
                 {random_tensor(rng, Shape{3, 4}), random_tensor(rng, Shape{4, 2}), random_tensor(rng, Shape{2})});
}

TEST(GradCheck, Normalizations) {
  Rng rng(4);
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(softmax_rows(v[0])); },
                 {random_tensor(rng, Shape{3, 5}, -2, 2)});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(layer_norm_rows(v[0], v[1], v[2])); },
                 {random_tensor(rng, Shape{3, 6}), random_tensor(rng, Shape{6}), random_tensor(rng, Shape{6})});
}

TEST(GradCheck, Convolution) {
  Rng rng(5);
  for (int dilation : {1, 2}) {
    expect_grad_ok([dilation](Graph&, const std::vector<Var>& v) { return probe(conv2d(v[0], v[1], v[2], dilation)); },
                   {random_tensor(rng, Shape{4, 5, 2}), random_tensor(rng, Shape{3, 3, 2, 3}), random_tensor(rng, Shape{3})});
  }
}

TEST(GradCheck, Layout) {
  Rng rng(6);
  auto a = random_tensor(rng, Shape{4, 6});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(reshape(v[0], Shape{2, 12})); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(slice_cols(v[0], 1, 4)); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(concat_cols({v[0], v[1], v[0]})); },
                 {a, random_tensor(rng, Shape{4, 2})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(concat_rows({v[0], v[1]})); },
                 {a, random_tensor(rng, Shape{1, 6})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(gather_rows(v[0], {3, 0, 3, 1})); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(scatter_add_rows(v[0], {2, 0, 2, 4}, 5)); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(gather_blocks(v[0], {{0, 0}, {3, 2}, {1, 4}}, 2)); },
                 {a});
}

TEST(GradCheck, Reductions) {
  Rng rng(7);
  auto a = random_tensor(rng, Shape{4, 3});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(mean_rows(v[0])); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return mean_all(v[0]); }, {a});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(row_norm(v[0])); }, {a});
  std::vector<double> targets(12);
  for (double& t : targets) t = rng.uniform() < 0.5 ? 0.0 : 1.0;
  expect_grad_ok([targets](Graph&, const std::vector<Var>& v) { return bce_with_logits_sum(v[0], targets); },
                 {random_tensor(rng, Shape{3, 4}, -3, 3)});
}

TEST(GradCheck, RowNormAtZeroHasZeroGradient) {
  Graph g;
  Var x = g.input(Shape{1, 3}, {0.0, 0.0, 0.0});
  Var n = sum_all(row_norm(x));
  g.backward(n);
  for (double v : x.grad()) EXPECT_EQ(v, 0.0);
}

TEST(GradCheck, Distributions) {
  Rng rng(8);
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(ordinal_distribution(v[0])); },
                 {random_tensor(rng, Shape{4, 6}, -3, 3)});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(normalize_rows(v[0])); },
                 {random_tensor(rng, Shape{3, 5}, 0.1, 2.0)});
  const GridAxis axis{-1.0, 1.0, 8};
  expect_grad_ok([axis](Graph&, const std::vector<Var>& v) { return probe(hat_distribution(v[0], axis)); },
                 {Tensor(Shape{3, 1}, {-0.33, 0.12, 0.71})});
}

TEST(Distributions, OrdinalRowsSumToOne) {
  Rng rng(9);
  Graph g;
  Var d = ordinal_distribution(g.constant(random_tensor(rng, Shape{20, 7}, -4, 4)));
  for (int r = 0; r < 20; ++r) {
    double s = 0.0;
    for (int k = 0; k < 7; ++k) {
      EXPECT_GE(d.value()[static_cast<std::size_t>(r * 7 + k)], 0.0);
      s += d.value()[static_cast<std::size_t>(r * 7 + k)];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Distributions, OrdinalOfZeroLogitsSplitsEnds) {
  Graph g;
  Var d = ordinal_distribution(g.constant(Shape{1, 4}, std::vector<double>(4, 0.0)));
  EXPECT_DOUBLE_EQ(d.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(d.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(d.value()[2], 0.0);
  EXPECT_DOUBLE_EQ(d.value()[3], 0.5);
}

TEST(GradCheck, Sampling) {
  Rng rng(10);
  std::vector<PlanePoint> pts = {{-0.31, 0.22, 0}, {0.55, -0.71, 2}, {0.05, 0.93, 1}};
  expect_grad_ok([pts](Graph&, const std::vector<Var>& v) { return probe(bilinear_sample_blocks(v[0], pts, 2)); },
                 {random_tensor(rng, Shape{4, 5, 4})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(trilinear_sample(v[0], v[1])); },
                 {random_tensor(rng, Shape{3, 4, 5, 2}), Tensor(Shape{2, 3}, {-0.13, 0.41, 0.27, 0.62, -0.37, -0.58})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(outer_rows(v[0], v[1])); },
                 {random_tensor(rng, Shape{3, 4}), random_tensor(rng, Shape{3, 2})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(group_weighted_sum(v[0], v[1])); },
                 {random_tensor(rng, Shape{6, 3}), random_tensor(rng, Shape{2, 3})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(sinusoid_encode(v[0], 3)); },
                 {random_tensor(rng, Shape{2, 3})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(anchor_ensemble(v[0], v[1], v[2])); },
                 {random_tensor(rng, Shape{4, 3}), random_tensor(rng, Shape{4, 6}), random_tensor(rng, Shape{4, 2})});
  expect_grad_ok([](Graph&, const std::vector<Var>& v) { return probe(center_on_first_row(v[0])); },
                 {random_tensor(rng, Shape{4, 3})});
}

TEST(GradCheck, LiftedSample) {
  Rng rng(11);
  auto layout = std::make_shared<LiftLayout>();
  layout->depth = GridAxis{-1.0, 1.0, 5};
  // Two levels: 4x4 and 2x2, entries pointing at 6 token rows and 6 dist rows.
  for (int size : {4, 2}) {
    LiftLevel lv;
    lv.height = lv.width = size;
    lv.pixel_start.push_back(0);
    for (int p = 0; p < size * size; ++p) {
      const int n = static_cast<int>(rng.below(3));
      for (int e = 0; e < n; ++e) {
        lv.entry_row.push_back(static_cast<int>(rng.below(6)));
        lv.entry_token.push_back(static_cast<int>(rng.below(6)));
      }
      lv.pixel_start.push_back(static_cast<int>(lv.entry_row.size()));
    }
    layout->levels.push_back(std::move(lv));
  }
  std::shared_ptr<const LiftLayout> shared = layout;
  expect_grad_ok(
      [shared](Graph&, const std::vector<Var>& v) { return probe(lifted_sample(v[0], v[1], shared, v[2], 2, 2)); },
      {random_tensor(rng, Shape{6, 4}), random_tensor(rng, Shape{6, 5}, 0.0, 1.0), random_tensor(rng, Shape{8, 3}, -0.9, 0.9)});
}

TEST(Graph, BackwardIsLinear) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor(rng, Shape{3, 3});
    auto w = random_tensor(rng, Shape{3, 3});
    auto f = [&](Graph& g, Var v) { return sum_all(gelu(matmul(v, g.constant(w)))); };
    auto h = [&](Graph&, Var v) { return sum_all(mul(softmax_rows(v), v)); };
    std::vector<double> gf, gh, gsum;
    {
      Graph g;
      Var v = g.input(x);
      g.backward(f(g, v));
      gf.assign(v.grad().begin(), v.grad().end());
    }
    {
      Graph g;
      Var v = g.input(x);
      g.backward(h(g, v));
      gh.assign(v.grad().begin(), v.grad().end());
    }
    {
      Graph g;
      Var v = g.input(x);
      g.backward(add(f(g, v), h(g, v)));
      gsum.assign(v.grad().begin(), v.grad().end());
    }
    for (std::size_t i = 0; i < gf.size(); ++i) EXPECT_NEAR(gsum[i], gf[i] + gh[i], 1e-12);
  }
}

// ---------------------------------------------------------------- optimizer

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore store;
  Rng rng(13);
  store.add_uniform("w", Shape{5}, 5, rng);
  const auto before = store.at("w").value;
  AdamW opt(OptimizerConfig{});
  opt.step(store);
  EXPECT_EQ(store.at("w").value, before);
}

TEST(Optimizer, StepDescendsOnQuadratic) {
  ParameterStore store;
  store.add_constant("w", Shape{1}, 1.0);
  Graph g;
  Var w = g.param(store.at("w"));
  g.backward(mul(w, w));
  g.flush_param_grads();
  AdamW opt(OptimizerConfig{});
  opt.step(store);
  EXPECT_LT(std::abs(store.at("w").value[0]), 1.0);
  EXPECT_EQ(store.at("w").grad[0], 0.0);
}

TEST(Optimizer, ThreeStepMomentRecursion) {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.01;
  ParameterStore store;
  store.add_constant("w", Shape{1}, 0.7);
  AdamW opt(cfg);
  const double grads[3] = {0.5, -1.25, 2.0};
  double w = 0.7, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    store.at("w").grad[0] = grads[t - 1];
    opt.step(store);
    const double gk = grads[t - 1];
    m = 0.9 * m + 0.1 * gk;
    v = 0.999 * v + 0.001 * gk * gk;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    w -= 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * w);
    EXPECT_NEAR(store.at("w").value[0], w, 1e-10);
  }
}

TEST(Optimizer, EpochDecayMultipliesLearningRate) {
  AdamW opt(OptimizerConfig{});
  opt.end_epoch();
  opt.end_epoch();
  EXPECT_NEAR(opt.learning_rate(), 4e-4 * 0.98 * 0.98, 1e-18);
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  ParameterStore store;
  store.add("decoder.layer0.wq", Shape{2});
  store.at("decoder.layer0.wq").grad[1] = std::numeric_limits<double>::infinity();
  AdamW opt(OptimizerConfig{});
  try {
    opt.step(store);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.layer0.wq"), std::string::npos);
  }
}

TEST(Optimizer, RejectsInvalidConfig) {
  OptimizerConfig cfg;
  cfg.decay = 1.5;
  EXPECT_THROW(AdamW{cfg}, std::invalid_argument);
  cfg.decay = 0.98;
  cfg.learning_rate = 0.0;
  EXPECT_THROW(AdamW{cfg}, std::invalid_argument);
}

// ---------------------------------------------------------------- parameters and randomness

TEST(Parameters, SeededInitializationIsBitIdentical) {
  auto build = [](std::uint64_t seed) {
    ParameterStore s;
    Rng rng(seed);
    s.add_uniform("a", Shape{4, 4}, 4, rng);
    s.add_uniform("b", Shape{7}, 7, rng);
    return s;
  };
  const auto s1 = build(5), s2 = build(5), s3 = build(6);
  EXPECT_EQ(s1.at("a").value, s2.at("a").value);
  EXPECT_EQ(s1.at("b").value, s2.at("b").value);
  EXPECT_NE(s1.at("a").value, s3.at("a").value);
}

TEST(Parameters, DuplicateNameRejected) {
  ParameterStore s;
  s.add("x", Shape{1});
  EXPECT_THROW(s.add("x", Shape{1}), std::invalid_argument);
}

TEST(Rng, StreamsAreIndependentAndReproducible) {
  auto a = Rng::stream(7, 0), b = Rng::stream(7, 0), c = Rng::stream(7, 1);
  const double x = a.uniform();
  EXPECT_EQ(x, b.uniform());
  EXPECT_NE(x, c.uniform());
}

// ---------------------------------------------------------------- container

TEST(Container, RoundTripIsBitExact) {
  Rng rng(14);
  ParameterStore store;
  store.add_uniform("anchors.offsetmap.weight", Shape{8, 24}, 8, rng);
  store.add_uniform("ensemble.head", Shape{3}, 1, rng);
  store.at("ensemble.head").value = {1.0 / 3.0, -0.0, 5e-324};
  const std::string bytes = io::encode(io::to_container(store, {{"variant", "full"}}));
  const auto back = io::decode(bytes);
  EXPECT_EQ(back.meta.at("variant"), "full");
  ParameterStore other = store;
  for (std::size_t i = 0; i < other.count(); ++i) std::fill(other[i].value.begin(), other[i].value.end(), 0.0);
  io::restore(other, back);
  for (std::size_t i = 0; i < store.count(); ++i)
    for (std::size_t k = 0; k < store[i].value.size(); ++k)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(store[i].value[k]), std::bit_cast<std::uint64_t>(other[i].value[k]));
  EXPECT_EQ(io::encode(back), bytes);
}

TEST(Container, RejectsBadMagicAndTruncation) {
  EXPECT_THROW(io::decode("NOTALFT!xxxxxxxx"), io::FormatError);
  io::Container c;
  c.arrays.push_back({"x", Shape{2}, {1.0, 2.0}});
  std::string bytes = io::encode(c);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(io::decode(bytes), io::FormatError);
}

TEST(Container, RestoreChecksShapes) {
  ParameterStore a, b;
  a.add("w", Shape{2, 3});
  b.add("w", Shape{3, 2});
  EXPECT_THROW(io::restore(b, io::to_container(a, {})), io::FormatError);
}
