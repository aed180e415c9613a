#pragma once

// Correlation-fusion: depthwise correlation between branch features, resize
// of the response back to the search-feature extent, and elementwise addition
// into the search branch. Parameter-free.

#include <vector>

#include "dcffnet/autodiff.hpp"

namespace dcff {

struct FusionTapReport {
  std::string tap;
  std::vector<int64_t> response_shape;
  std::vector<int64_t> resized_shape;
  std::vector<int64_t> output_shape;
  double response_min = 0.0;
  double response_max = 0.0;
};

// Optional per-channel 1/(Ht*Wt) scaling keeps the fused response magnitude
// commensurate with the features it is added to.
template <typename T>
Tensor<T> correlation_fusion(const Tensor<T>& search_feat, const Tensor<T>& templ_feat,
                             bool response_scaling = true, FusionTapReport* report = nullptr) {
  Tensor<T> resp = depthwise_xcorr(search_feat, templ_feat);
  if (report != nullptr) {
    report->response_shape = resp.shape;
    report->response_min = static_cast<double>(resp.min_value());
    report->response_max = static_cast<double>(resp.max_value());
  }
  if (response_scaling) {
    const double inv = 1.0 / static_cast<double>(templ_feat.shape[1] * templ_feat.shape[2]);
    for (auto& v : resp.data) v = static_cast<T>(inv * static_cast<double>(v));
  }
  Tensor<T> up = resize_trilinear(resp, search_feat.shape);
  if (report != nullptr) report->resized_shape = up.shape;
  Tensor<T> out = add(search_feat, up);
  if (report != nullptr) report->output_shape = out.shape;
  return out;
}

// Graph form used inside the backbone; gradients flow to both branches.
template <typename T>
int correlation_fusion_node(Graph<T>& g, int search_feat, int templ_feat,
                            bool response_scaling = true) {
  int resp = g.dw_xcorr(search_feat, templ_feat);
  if (response_scaling) {
    const auto& ts = g.value(templ_feat).shape;
    resp = g.scale(resp, 1.0 / static_cast<double>(ts[1] * ts[2]));
  }
  const int up = g.resize(resp, g.value(search_feat).shape);
  return g.add(search_feat, up);
}

}  // namespace dcff
