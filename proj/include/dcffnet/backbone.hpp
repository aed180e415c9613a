#pragma once

// The siamese feature extractor: three leading conv layers, two bottleneck
// blocks, three trailing conv layers. Correlation-fusion taps sit between
// conv3 and block2 and between block2 and conv4, on the search branch only.
// Both branches share one parameter set.

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dcffnet/cf.hpp"
#include "dcffnet/heads.hpp"

namespace dcff {

enum class Role { tmpl, search };
enum class StageKind { pretrain, finetune };

struct ConvLayerCfg {
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int out_channels = 1;
};

struct BlockCfg {
  int units = 1;
  int mid_channels = 1;
  int out_channels = 1;
  int first_stride = 1;
};

struct ModelConfig {
  int template_size = 127;
  int search_size = 255;
  std::array<ConvLayerCfg, 3> pre;   // conv1..conv3
  BlockCfg block2, block3;
  std::array<ConvLayerCfg, 3> post;  // conv4..conv6
  int head_mid = 256;
  bool cf_first = false;
  bool cf_second = false;
  bool cf_response_scaling = true;

  // 255 -> 123 -> 105 -> 87 -> 44 -> 44 -> 42 -> 40 -> 38 on the search
  // branch; 127 -> 59 -> 41 -> 23 -> 12 -> 12 -> 10 -> 8 -> 6 on the
  // template branch. The k19 layers are the minimal three-layer valid-conv
  // chain reaching 87 from 255 with a single stride-2.
  static ModelConfig reference() {
    ModelConfig c;
    c.template_size = 127;
    c.search_size = 255;
    c.pre = {{{11, 2, 0, 32}, {19, 1, 0, 64}, {19, 1, 0, 96}}};
    c.block2 = {3, 64, 256, 2};
    c.block3 = {4, 128, 512, 1};
    c.post = {{{3, 1, 0, 512}, {3, 1, 0, 512}, {3, 1, 0, 512}}};
    c.head_mid = 256;
    return c;
  }

  // Small enough for finite-difference checks and overfit runs in seconds.
  static ModelConfig toy() {
    ModelConfig c;
    c.template_size = 31;
    c.search_size = 63;
    c.pre = {{{3, 2, 1, 8}, {3, 1, 1, 8}, {3, 1, 1, 8}}};
    c.block2 = {1, 4, 16, 2};
    c.block3 = {1, 8, 16, 1};
    c.post = {{{3, 1, 0, 16}, {3, 1, 0, 16}, {3, 1, 0, 16}}};
    c.head_mid = 8;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Shape propagation

struct StageShape {
  int64_t ch = 0, h = 0, w = 0;
  int64_t stride = 1;   // total network stride at this point
  double offset = 0.0;  // image coordinate of index (0,0)
};

struct BranchShapes {
  StageShape input, conv1, conv2, conv3, block2, block3, conv4, conv5, conv6;
  const StageShape& final_map() const { return conv6; }
};

inline StageShape apply_conv_shape(const StageShape& in, int kernel, int stride, int padding,
                                   int out_ch, const std::string& what) {
  StageShape out = in;
  out.ch = out_ch;
  out.h = conv_out_extent(in.h, kernel, stride, padding);
  out.w = conv_out_extent(in.w, kernel, stride, padding);
  DCFF_CHECK(out.h >= 1 && out.w >= 1, what + ": output extent < 1 (input " +
                                           std::to_string(in.h) + "x" + std::to_string(in.w) + ")");
  out.offset = in.offset + static_cast<double>(in.stride) * ((kernel - 1) / 2.0 - padding);
  out.stride = in.stride * stride;
  return out;
}

inline BranchShapes propagate_shapes(const ModelConfig& cfg, Role role) {
  BranchShapes s;
  const int size = role == Role::tmpl ? cfg.template_size : cfg.search_size;
  s.input = {3, size, size, 1, 0.0};
  s.conv1 = apply_conv_shape(s.input, cfg.pre[0].kernel, cfg.pre[0].stride, cfg.pre[0].padding,
                             cfg.pre[0].out_channels, "conv1");
  s.conv2 = apply_conv_shape(s.conv1, cfg.pre[1].kernel, cfg.pre[1].stride, cfg.pre[1].padding,
                             cfg.pre[1].out_channels, "conv2");
  s.conv3 = apply_conv_shape(s.conv2, cfg.pre[2].kernel, cfg.pre[2].stride, cfg.pre[2].padding,
                             cfg.pre[2].out_channels, "conv3");
  // bottleneck blocks: only the first unit's 3x3 (k3 p1) moves the grid
  s.block2 = apply_conv_shape(s.conv3, 3, cfg.block2.first_stride, 1, cfg.block2.out_channels,
                              "block2");
  s.block3 = apply_conv_shape(s.block2, 3, cfg.block3.first_stride, 1, cfg.block3.out_channels,
                              "block3");
  s.conv4 = apply_conv_shape(s.block3, cfg.post[0].kernel, cfg.post[0].stride, cfg.post[0].padding,
                             cfg.post[0].out_channels, "conv4");
  s.conv5 = apply_conv_shape(s.conv4, cfg.post[1].kernel, cfg.post[1].stride, cfg.post[1].padding,
                             cfg.post[1].out_channels, "conv5");
  s.conv6 = apply_conv_shape(s.conv5, cfg.post[2].kernel, cfg.post[2].stride, cfg.post[2].padding,
                             cfg.post[2].out_channels, "conv6");
  return s;
}

// Head map geometry: DW-XCorr of the two final maps shifts the grid origin by
// half the template extent.
inline HeadGeom derive_head_geom(const ModelConfig& cfg) {
  const BranchShapes s = propagate_shapes(cfg, Role::search);
  const BranchShapes t = propagate_shapes(cfg, Role::tmpl);
  DCFF_CHECK(t.conv6.h <= s.conv6.h && t.conv6.w <= s.conv6.w,
             "head: template final map larger than search final map");
  HeadGeom g;
  g.stride = static_cast<int>(s.conv6.stride);
  g.offset = s.conv6.offset +
             static_cast<double>(s.conv6.stride) * (static_cast<double>(t.conv6.h) - 1.0) / 2.0;
  g.h = s.conv6.h - t.conv6.h + 1;
  g.w = s.conv6.w - t.conv6.w + 1;
  return g;
}

inline void validate_config(const ModelConfig& cfg) {
  DCFF_CHECK(cfg.template_size < cfg.search_size, "config: template_size must be < search_size");
  const BranchShapes s = propagate_shapes(cfg, Role::search);
  const BranchShapes t = propagate_shapes(cfg, Role::tmpl);
  DCFF_CHECK(t.conv3.h <= s.conv3.h && t.block2.h <= s.block2.h && t.conv6.h <= s.conv6.h,
             "config: template maps must fit inside search maps at every tap");
  const HeadGeom g = derive_head_geom(cfg);
  DCFF_CHECK(static_cast<int64_t>(g.stride) * (g.w - 1) + 1 <= cfg.search_size,
             "config: head map span exceeds the search image");
}

// ---------------------------------------------------------------------------
// Model: parameter table plus graph builders

// Node ids of the per-stage taps inside one graph.
struct BranchTaps {
  int after_conv3 = -1;
  int after_block2 = -1;
  int final = -1;
};

// Detached tap tensors, cached by the tracker for the whole sequence.
template <typename T>
struct BranchFeatures {
  std::optional<Tensor<T>> after_conv3;
  std::optional<Tensor<T>> after_block2;
  Tensor<T> final;
};

// conv (no bias) -> per-channel affine -> relu. Parameters are looked up in
// the graph's store as <name>.w / <name>.gamma / <name>.beta.
template <typename T>
int conv_affine_relu(Graph<T>& g, int x, const std::string& name, int in_ch,
                     const ConvLayerCfg& lc) {
  const ConvSpec spec{lc.kernel, lc.kernel, lc.stride, lc.padding, in_ch, lc.out_channels};
  const int c = g.conv2d(x, g.param(name + ".w"), -1, spec);
  return g.relu(g.scale_shift(c, g.param(name + ".gamma"), g.param(name + ".beta")));
}

// 1x1 reduce, 3x3 (stride lives here, padding 1), 1x1 expand, each
// conv+affine; projection shortcut when the unit changes stride or channels.
template <typename T>
int bottleneck_forward(Graph<T>& g, int x, const std::string& prefix, int in_ch, int mid, int out,
                       int stride) {
  auto conv_affine = [&](int in, const std::string& nm, int k, int s, int p, int ic, int oc) {
    const ConvSpec spec{k, k, s, p, ic, oc};
    const int c = g.conv2d(in, g.param(nm + ".w"), -1, spec);
    return g.scale_shift(c, g.param(nm + ".gamma"), g.param(nm + ".beta"));
  };
  const int r = g.relu(conv_affine(x, prefix + ".reduce", 1, 1, 0, in_ch, mid));
  const int m = g.relu(conv_affine(r, prefix + ".conv", 3, stride, 1, mid, mid));
  const int e = conv_affine(m, prefix + ".expand", 1, 1, 0, mid, out);
  const int shortcut = (stride != 1 || in_ch != out)
                           ? conv_affine(x, prefix + ".proj", 1, stride, 0, in_ch, out)
                           : x;
  return g.relu(g.add(shortcut, e));
}

template <typename T>
int block_forward(Graph<T>& g, int x, const std::string& name, int in_ch, const BlockCfg& bc) {
  int cur = x;
  int ch = in_ch;
  for (int u = 0; u < bc.units; ++u) {
    const int stride = u == 0 ? bc.first_stride : 1;
    cur = bottleneck_forward(g, cur, name + ".u" + std::to_string(u), ch, bc.mid_channels,
                             bc.out_channels, stride);
    ch = bc.out_channels;
  }
  return cur;
}

template <typename T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> params;

  // He fan-in init for conv weights, ones for gamma, zeros for beta and
  // biases. Parameter creation order is fixed, so a seed fully determines
  // every value.
  static Model<T> init(const ModelConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    Model<T> m;
    m.cfg = cfg;
    Rng rng(seed);

    int ch = 3;
    for (int i = 0; i < 3; ++i) {
      m.add_conv_affine("conv" + std::to_string(i + 1), ch, cfg.pre[static_cast<size_t>(i)], rng);
      ch = cfg.pre[static_cast<size_t>(i)].out_channels;
    }
    ch = m.add_block("block2", ch, cfg.block2, rng);
    ch = m.add_block("block3", ch, cfg.block3, rng);
    for (int i = 0; i < 3; ++i) {
      m.add_conv_affine("conv" + std::to_string(i + 4), ch, cfg.post[static_cast<size_t>(i)], rng);
      ch = cfg.post[static_cast<size_t>(i)].out_channels;
    }
    m.params.add("fc.b", Tensor<T>({1}, T(0)));
    m.add_head_conv("head.cls1", ch, cfg.head_mid, rng);
    m.add_head_conv("head.cls2", cfg.head_mid, 2, rng);
    m.add_head_conv("head.reg1", ch, cfg.head_mid, rng);
    m.add_head_conv("head.reg2", cfg.head_mid, 4, rng);
    return m;
  }

  // Runs one branch. For the search branch with fusion flags on, the matching
  // template taps must be supplied; taps are recorded pre-fusion.
  BranchTaps forward_branch(Graph<T>& g, int image, Role role,
                            const BranchTaps* templ_taps = nullptr) const {
    const auto& is = g.value(image).shape;
    const int want = role == Role::tmpl ? cfg.template_size : cfg.search_size;
    DCFF_CHECK(is.size() == 3 && is[0] == 3 && is[1] == want && is[2] == want,
               "forward_branch: expected 3x" + std::to_string(want) + "x" + std::to_string(want) +
                   " image, got " + shape_str(is));
    const bool fused = role == Role::search;
    if (fused && cfg.cf_first)
      DCFF_CHECK(templ_taps != nullptr && templ_taps->after_conv3 >= 0,
                 "forward_branch: cf_first is on but no template conv3 tap was supplied");
    if (fused && cfg.cf_second)
      DCFF_CHECK(templ_taps != nullptr && templ_taps->after_block2 >= 0,
                 "forward_branch: cf_second is on but no template block2 tap was supplied");

    BranchTaps taps;
    int x = image;
    int ch = 3;
    for (int i = 0; i < 3; ++i) {
      x = conv_affine_relu(g, x, "conv" + std::to_string(i + 1), ch, cfg.pre[static_cast<size_t>(i)]);
      ch = cfg.pre[static_cast<size_t>(i)].out_channels;
    }
    if (cfg.cf_first) taps.after_conv3 = x;
    if (fused && cfg.cf_first)
      x = correlation_fusion_node(g, x, templ_taps->after_conv3, cfg.cf_response_scaling);

    x = dcff::block_forward(g, x, "block2", ch, cfg.block2);
    ch = cfg.block2.out_channels;
    if (cfg.cf_second) taps.after_block2 = x;
    if (fused && cfg.cf_second)
      x = correlation_fusion_node(g, x, templ_taps->after_block2, cfg.cf_response_scaling);

    x = dcff::block_forward(g, x, "block3", ch, cfg.block3);
    ch = cfg.block3.out_channels;
    for (int i = 0; i < 3; ++i) {
      x = conv_affine_relu(g, x, "conv" + std::to_string(i + 4), ch, cfg.post[static_cast<size_t>(i)]);
      ch = cfg.post[static_cast<size_t>(i)].out_channels;
    }
    taps.final = x;
    return taps;
  }

  int fc_response_node(Graph<T>& g, int search_final, int templ_final) const {
    return fc_response(g, search_final, templ_final, g.param("fc.b"));
  }

  ClsRegOut<T> clsreg(Graph<T>& g, int search_final, int templ_final) const {
    ClsRegParamIds<T> ids{g.param("head.cls1.w"), g.param("head.cls1.b"),
                          g.param("head.cls2.w"), g.param("head.cls2.b"),
                          g.param("head.reg1.w"), g.param("head.reg1.b"),
                          g.param("head.reg2.w"), g.param("head.reg2.b")};
    return clsreg_forward(g, search_final, templ_final, ids, derive_head_geom(cfg));
  }

  // Trainable parameter names. Pretraining trains everything; fine-tuning
  // trains only the last two conv layers and the prediction head.
  std::set<std::string> freeze_mask(StageKind stage) const {
    std::set<std::string> out;
    for (const auto& n : params.names()) {
      if (stage == StageKind::pretrain) {
        out.insert(n);
      } else if (n.rfind("conv5.", 0) == 0 || n.rfind("conv6.", 0) == 0 ||
                 n.rfind("head.", 0) == 0) {
        out.insert(n);
      }
    }
    return out;
  }

  int64_t param_count() const { return params.total_elements(); }

 private:
  static double he_std(int64_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

  void add_conv_weight(const std::string& name, int out_ch, int in_ch, int k, Rng& rng) {
    Tensor<T> w({out_ch, in_ch, k, k});
    fill_normal(w, rng, 0.0, he_std(static_cast<int64_t>(in_ch) * k * k));
    params.add(name, std::move(w));
  }

  void add_conv_affine(const std::string& name, int in_ch, const ConvLayerCfg& lc, Rng& rng) {
    add_conv_weight(name + ".w", lc.out_channels, in_ch, lc.kernel, rng);
    params.add(name + ".gamma", Tensor<T>({lc.out_channels}, T(1)));
    params.add(name + ".beta", Tensor<T>({lc.out_channels}, T(0)));
  }

  void add_bottleneck_conv(const std::string& name, int out_ch, int in_ch, int k, Rng& rng) {
    add_conv_weight(name + ".w", out_ch, in_ch, k, rng);
    params.add(name + ".gamma", Tensor<T>({out_ch}, T(1)));
    params.add(name + ".beta", Tensor<T>({out_ch}, T(0)));
  }

  int add_block(const std::string& name, int in_ch, const BlockCfg& bc, Rng& rng) {
    int ch = in_ch;
    for (int u = 0; u < bc.units; ++u) {
      const std::string prefix = name + ".u" + std::to_string(u);
      const int stride = u == 0 ? bc.first_stride : 1;
      add_bottleneck_conv(prefix + ".reduce", bc.mid_channels, ch, 1, rng);
      add_bottleneck_conv(prefix + ".conv", bc.mid_channels, bc.mid_channels, 3, rng);
      add_bottleneck_conv(prefix + ".expand", bc.out_channels, bc.mid_channels, 1, rng);
      if (stride != 1 || ch != bc.out_channels)
        add_bottleneck_conv(prefix + ".proj", bc.out_channels, ch, 1, rng);
      ch = bc.out_channels;
    }
    return ch;
  }

  void add_head_conv(const std::string& name, int in_ch, int out_ch, Rng& rng) {
    add_conv_weight(name + ".w", out_ch, in_ch, 1, rng);
    params.add(name + ".b", Tensor<T>({out_ch}, T(0)));
  }
};

// Detach tap tensors out of a graph (tracker-side cache).
template <typename T>
BranchFeatures<T> detach_features(const Graph<T>& g, const BranchTaps& taps) {
  BranchFeatures<T> f;
  if (taps.after_conv3 >= 0) f.after_conv3 = g.value(taps.after_conv3);
  if (taps.after_block2 >= 0) f.after_block2 = g.value(taps.after_block2);
  f.final = g.value(taps.final);
  return f;
}

// Re-attach cached features as constants for a fresh per-frame graph.
template <typename T>
BranchTaps attach_features(Graph<T>& g, const BranchFeatures<T>& f) {
  BranchTaps taps;
  if (f.after_conv3) taps.after_conv3 = g.constant(*f.after_conv3);
  if (f.after_block2) taps.after_block2 = g.constant(*f.after_block2);
  taps.final = g.constant(f.final);
  return taps;
}

}  // namespace dcff
