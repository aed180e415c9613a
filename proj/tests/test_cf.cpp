#include "dcffnet/cf.hpp"

#include <gtest/gtest.h>

namespace {

using dcff::Graph;
using dcff::Rng;
using dcff::TensorD;

TensorD random_tensor(std::vector<int64_t> shape, uint64_t seed) {
  TensorD t(std::move(shape));
  Rng rng(seed);
  dcff::fill_normal(t, rng, 0.0, 1.0);
  return t;
}

TEST(CorrelationFusion, ZeroTemplateIsIdentity) {
  TensorD search = random_tensor({3, 8, 8}, 1);
  TensorD templ({3, 3, 3}, 0.0);
  auto out = dcff::correlation_fusion(search, templ, true);
  ASSERT_EQ(out.shape, search.shape);
  for (size_t i = 0; i < out.data.size(); ++i) ASSERT_EQ(out.data[i], search.data[i]);
}

TEST(CorrelationFusion, ShapePreservedAtReferenceTapSizes) {
  TensorD search = random_tensor({2, 87, 87}, 2);
  TensorD templ = random_tensor({2, 23, 23}, 3);
  dcff::FusionTapReport report;
  report.tap = "after_conv3";
  auto out = dcff::correlation_fusion(search, templ, true, &report);
  EXPECT_EQ(out.shape, search.shape);
  EXPECT_EQ(report.response_shape, (std::vector<int64_t>{2, 65, 65}));
  EXPECT_EQ(report.resized_shape, (std::vector<int64_t>{2, 87, 87}));
  EXPECT_EQ(report.output_shape, search.shape);
}

TEST(CorrelationFusion, MatchesHandChainedKernels) {
  TensorD search = random_tensor({3, 9, 9}, 4);
  TensorD templ = random_tensor({3, 4, 4}, 5);
  for (const bool scaling : {false, true}) {
    auto got = dcff::correlation_fusion(search, templ, scaling);
    TensorD resp = dcff::depthwise_xcorr(search, templ);
    if (scaling)
      for (auto& v : resp.data) v = (1.0 / 16.0) * v;
    TensorD want = dcff::add(search, dcff::resize_trilinear(resp, search.shape));
    ASSERT_EQ(got.shape, want.shape);
    for (size_t i = 0; i < want.data.size(); ++i) ASSERT_EQ(got.data[i], want.data[i]);
  }
}

TEST(CorrelationFusion, GraphFormMatchesTensorForm) {
  TensorD search = random_tensor({2, 7, 7}, 6);
  TensorD templ = random_tensor({2, 3, 3}, 7);
  Graph<double> g;
  const int out = dcff::correlation_fusion_node(g, g.constant(search), g.constant(templ), true);
  auto want = dcff::correlation_fusion(search, templ, true);
  for (size_t i = 0; i < want.data.size(); ++i) ASSERT_EQ(g.value(out).data[i], want.data[i]);
  // parameter-free: no param nodes appear
  EXPECT_EQ(g.count_op(dcff::Op::param), 0);
}

// An exact translated copy of the template on a zero background puts the
// response argmax at the true offset.
TEST(CorrelationFusion, PeakAlignsWithTrueOffset) {
  TensorD templ = random_tensor({2, 4, 4}, 8);
  const int64_t dy = 3, dx = 5;
  TensorD search({2, 12, 12}, 0.0);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t x = 0; x < 4; ++x) search.at(c, dy + y, dx + x) = templ.at(c, y, x);
  TensorD resp = dcff::depthwise_xcorr(search, templ);
  // sum channels, then argmax
  int64_t best = 0;
  double bestv = -1e300;
  for (int64_t y = 0; y < resp.shape[1]; ++y)
    for (int64_t x = 0; x < resp.shape[2]; ++x) {
      const double v = resp.at(0, y, x) + resp.at(1, y, x);
      if (v > bestv) {
        bestv = v;
        best = y * resp.shape[2] + x;
      }
    }
  EXPECT_EQ(best / resp.shape[2], dy);
  EXPECT_EQ(best % resp.shape[2], dx);
}

TEST(CorrelationFusion, GradientsReachBothInputs) {
  TensorD search = random_tensor({2, 6, 6}, 9);
  TensorD templ = random_tensor({2, 3, 3}, 10);
  Graph<double> g;
  const int si = g.constant(search);
  const int ti = g.constant(templ);
  const int out = dcff::correlation_fusion_node(g, si, ti, true);
  auto grads = g.backward(g.sum(out));
  ASSERT_TRUE(grads.has(si));
  ASSERT_TRUE(grads.has(ti));
  double tmag = 0;
  for (double v : grads.at(ti).data) tmag += std::abs(v);
  EXPECT_GT(tmag, 0.0);
}

}  // namespace
