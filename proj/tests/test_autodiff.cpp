#include "dcffnet/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "dcffnet/gradcheck.hpp"

namespace {

using dcff::Graph;
using dcff::OptimState;
using dcff::ParamStore;
using dcff::Rng;
using dcff::TensorD;

TEST(Backward, SumGivesOnes) {
  ParamStore<double> store;
  store.add("w", TensorD({2, 3}, 0.25));
  Graph<double> g(&store);
  auto grads = g.backward(g.sum(g.param("w")));
  auto pg = grads.params();
  ASSERT_TRUE(pg.count("w"));
  for (double v : pg["w"].data) EXPECT_DOUBLE_EQ(v, 1.0);
}

// Every template element participates in all four 2x2 windows of a 3x3
// search map of ones.
TEST(Backward, XcorrTemplateGradientCountsWindows) {
  ParamStore<double> store;
  store.add("t", TensorD({1, 2, 2}, 0.5));
  Graph<double> g(&store);
  const int s = g.constant(TensorD({1, 3, 3}, 1.0));
  auto grads = g.backward(g.sum(g.dw_xcorr(s, g.param("t"))));
  auto pg = grads.params();
  for (double v : pg["t"].data) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph<double> g;
  const int x = g.constant(TensorD({2, 2}, 1.0));
  EXPECT_THROW(g.backward(x), dcff::Error);
}

TEST(Backward, DeterministicAcrossRebuilds) {
  auto run = [] {
    ParamStore<double> store;
    Rng rng(77);
    TensorD w({2, 2, 3, 3});
    dcff::fill_normal(w, rng, 0.0, 1.0);
    store.add("w", w);
    Graph<double> g(&store);
    TensorD x({2, 6, 6});
    dcff::fill_normal(x, rng, 0.0, 1.0);
    const int conv = g.conv2d(g.constant(x), g.param("w"), -1, dcff::ConvSpec{3, 3, 1, 1, 2, 2});
    return g.backward(g.sum(g.relu(conv))).params()["w"];
  };
  auto a = run(), b = run();
  for (size_t i = 0; i < a.data.size(); ++i) ASSERT_EQ(a.data[i], b.data[i]);
}

TEST(Backward, LinearInUpstreamSeed) {
  ParamStore<double> store;
  Rng rng(123);
  TensorD w({1, 1, 3, 3});
  dcff::fill_normal(w, rng, 0.0, 1.0);
  store.add("w", w);
  TensorD x({1, 5, 5});
  dcff::fill_normal(x, rng, 0.0, 1.0);

  const double alpha = 3.75;
  Graph<double> g(&store);
  const int conv = g.conv2d(g.constant(x), g.param("w"), -1, dcff::ConvSpec{3, 3, 1, 0, 1, 1});
  const int base = g.sum(conv);
  const int scaled = g.scale(base, alpha);
  auto g1 = g.backward(base).params()["w"];
  auto g2 = g.backward(scaled).params()["w"];
  for (size_t i = 0; i < g1.data.size(); ++i) {
    const double want = alpha * g1.data[i];
    EXPECT_LT(std::abs(g2.data[i] - want) / std::max(1.0, std::abs(want)), 1e-12);
  }
}

TEST(GradCheck, AllRegisteredOpsPass) {
  for (const auto& report : dcff::grad_check_all(1234)) {
    EXPECT_TRUE(report.pass(1e-4)) << report.op << " worst rel err " << report.worst;
  }
}

TEST(GradCheck, ReportsPerInput) {
  auto report = dcff::grad_check("conv2d");
  ASSERT_EQ(report.inputs.size(), 3u);
  EXPECT_EQ(report.inputs[0].input, "input");
  EXPECT_LT(report.worst, 1e-4);
}

TEST(Sgd, PlainStep) {
  ParamStore<double> p;
  p.add("w", TensorD({1}, 1.0));
  OptimState<double> st;
  st.lr = 0.1;
  st.momentum = 0.0;
  st.weight_decay = 0.0;
  std::map<std::string, TensorD> grads{{"w", TensorD({1}, 0.5)}};
  dcff::sgd_step(p, grads, st, {"w"});
  EXPECT_DOUBLE_EQ(p.get("w").data[0], 0.95);
}

TEST(Sgd, MomentumStep) {
  ParamStore<double> p;
  p.add("w", TensorD({1}, 1.0));
  OptimState<double> st;
  st.lr = 0.1;
  st.momentum = 0.9;
  st.weight_decay = 0.0;
  st.velocity["w"] = TensorD({1}, 1.0);
  std::map<std::string, TensorD> grads{{"w", TensorD({1}, 0.0)}};
  dcff::sgd_step(p, grads, st, {"w"});
  EXPECT_DOUBLE_EQ(st.velocity["w"].data[0], 0.9);
  EXPECT_DOUBLE_EQ(p.get("w").data[0], 0.91);
}

TEST(Sgd, WeightDecayOnly) {
  ParamStore<double> p;
  p.add("w", TensorD({1}, 1.0));
  OptimState<double> st;
  st.lr = 0.1;
  st.momentum = 0.0;
  st.weight_decay = 0.0005;
  std::map<std::string, TensorD> grads{{"w", TensorD({1}, 0.0)}};
  dcff::sgd_step(p, grads, st, {"w"});
  EXPECT_DOUBLE_EQ(p.get("w").data[0], 0.99995);
}

TEST(Sgd, FrozenParametersBitwiseUnchanged) {
  ParamStore<double> p;
  p.add("a", TensorD({2}, {0.125, -0.75}));
  p.add("b", TensorD({2}, {1.0, 2.0}));
  const TensorD a_before = p.get("a");
  OptimState<double> st;
  std::map<std::string, TensorD> grads{{"a", TensorD({2}, 1.0)}, {"b", TensorD({2}, 1.0)}};
  for (int i = 0; i < 10; ++i) dcff::sgd_step(p, grads, st, {"b"});
  for (size_t i = 0; i < 2; ++i) ASSERT_EQ(p.get("a").data[i], a_before.data[i]);
  EXPECT_NE(p.get("b").data[0], 1.0);
}

TEST(Sgd, RejectsShapeMismatch) {
  ParamStore<double> p;
  p.add("w", TensorD({2}, 1.0));
  OptimState<double> st;
  std::map<std::string, TensorD> grads{{"w", TensorD({3}, 1.0)}};
  EXPECT_THROW(dcff::sgd_step(p, grads, st, {"w"}), dcff::Error);
}

TEST(Losses, LogisticFixedPoints) {
  Graph<double> g;
  // v = 0 everywhere -> ln 2
  const int v0 = g.constant(TensorD({1, 2, 2}, 0.0));
  const int l0 = g.logistic_loss(v0, TensorD({1, 2, 2}, 1.0));
  EXPECT_NEAR(g.value(l0).data[0], std::log(2.0), 1e-12);

  // y=+1, v large -> loss -> 0
  const int vbig = g.constant(TensorD({1, 1, 1}, 50.0));
  const int lbig = g.logistic_loss(vbig, TensorD({1, 1, 1}, 1.0));
  EXPECT_LT(g.value(lbig).data[0], 1e-20);

  // v=1, labels half/half -> (ln(1+e^-1) + ln(1+e^1)) / 2
  const int v1 = g.constant(TensorD({1, 1, 2}, 1.0));
  const int lmix = g.logistic_loss(v1, TensorD({1, 1, 2}, {1.0, -1.0}));
  const double want = 0.5 * (std::log1p(std::exp(-1.0)) + std::log1p(std::exp(1.0)));
  EXPECT_NEAR(g.value(lmix).data[0], want, 1e-12);
  EXPECT_NEAR(g.value(lmix).data[0], 0.8133, 5e-5);

  EXPECT_THROW(g.logistic_loss(v0, TensorD({1, 2, 2}, 0.5)), dcff::Error);
}

TEST(Losses, LogisticStableForLargeLogits) {
  Graph<double> g;
  const int v = g.constant(TensorD({1, 1, 2}, {700.0, -700.0}));
  const int l = g.logistic_loss(v, TensorD({1, 1, 2}, {-1.0, 1.0}));
  EXPECT_TRUE(std::isfinite(g.value(l).data[0]));
  EXPECT_NEAR(g.value(l).data[0], 700.0, 1e-9);
}

TEST(Losses, SoftmaxXentUniformLogitsIsLn2) {
  Graph<double> g;
  TensorD labels({3, 3}, -1.0);
  labels.data[0] = 1.0;
  labels.data[4] = 1.0;
  const int z = g.constant(TensorD({2, 3, 3}, 0.7));  // equal logits in both channels
  const int l = g.softmax_xent(z, labels, true);
  EXPECT_NEAR(g.value(l).data[0], std::log(2.0), 1e-12);
  const int lp = g.softmax_xent(z, labels, false);
  EXPECT_NEAR(g.value(lp).data[0], std::log(2.0), 1e-12);
}

TEST(Losses, SoftmaxXentShiftInvariance) {
  Rng rng(5);
  TensorD z({2, 3, 3});
  dcff::fill_normal(z, rng, 0.0, 1.0);
  TensorD labels({3, 3}, -1.0);
  labels.data[2] = 1.0;
  Graph<double> g;
  const int l1 = g.softmax_xent(g.constant(z), labels, true);
  TensorD shifted = z;
  const int64_t HW = 9;
  for (int64_t i = 0; i < HW; ++i) {
    shifted.data[static_cast<size_t>(i)] += 11.25;
    shifted.data[static_cast<size_t>(HW + i)] += 11.25;
  }
  const int l2 = g.softmax_xent(g.constant(shifted), labels, true);
  const double rel = std::abs(g.value(l1).data[0] - g.value(l2).data[0]) /
                     std::max(1.0, std::abs(g.value(l1).data[0]));
  EXPECT_LT(rel, 1e-12);
}

TEST(Losses, IouFixedPoints) {
  Graph<double> g;
  // pred == target -> loss 0
  TensorD pred({4, 1, 1}, {1.0, 2.0, 3.0, 4.0});
  TensorD mask({1, 1}, 1.0);
  const int l0 = g.iou_loss(g.constant(pred), pred, mask);
  EXPECT_NEAR(g.value(l0).data[0], 0.0, 1e-12);

  // containing box of double area -> IoU 0.5 -> ln 2
  const double s = std::sqrt(2.0);
  TensorD big({4, 1, 1}, {s, s, s, s});
  TensorD small({4, 1, 1}, {1.0, 1.0, 1.0, 1.0});
  const int lhalf = g.iou_loss(g.constant(big), small, mask);
  EXPECT_NEAR(g.value(lhalf).data[0], std::log(2.0), 1e-9);

  // disjoint (negative target extents force a clamped intersection)
  TensorD far({4, 1, 1}, {-2.0, 1.0, 3.0, 1.0});  // min(l,lh)+min(r,rh) <= 0
  const int ldis = g.iou_loss(g.constant(small), far, mask);
  EXPECT_NEAR(g.value(ldis).data[0], -std::log(1e-7), 1e-6);

  // no positives: zero loss plus the skip flag
  TensorD none({1, 1}, 0.0);
  const int lskip = g.iou_loss(g.constant(pred), pred, none);
  EXPECT_DOUBLE_EQ(g.value(lskip).data[0], 0.0);
  EXPECT_TRUE(g.node(lskip).zero_positives);
}

TEST(Graph, NodeCountAndOpCount) {
  Graph<double> g;
  const int a = g.constant(TensorD({1, 2, 2}, 1.0));
  const int b = g.constant(TensorD({1, 2, 2}, 2.0));
  g.add(a, b);
  EXPECT_EQ(g.size(), 3u);
  EXPECT_EQ(g.count_op(dcff::Op::add), 1);
  EXPECT_EQ(g.count_op(dcff::Op::conv2d), 0);
}

}  // namespace
