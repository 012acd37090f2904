#pragma once

#include <array>
#include <string>
#include <vector>

#include "gcunet/blocks.hpp"

namespace gcunet {

// Architecture hyperparameters. Four stage entries: three encoder stages plus
// the two-block bottleneck stage at the deepest width; the decoder mirrors
// the first three stages with two blocks each.
struct ModelConfig {
  int64_t img_size = 224;
  int64_t in_channels = 3;
  int64_t num_classes = 9;
  int64_t embed_dim = 64;
  std::vector<int64_t> depths{2, 2, 6, 2};
  std::vector<int64_t> heads{2, 4, 8, 16};
  std::vector<int64_t> windows{7, 7, 14, 7};
  int64_t mlp_ratio = 3;
  int64_t se_reduction = 4;
  std::string upsample = "tconv_fmb_se";
  double drop_rate = 0.0;
  double droppath_rate = 0.0;
  uint64_t seed = 42;

  int64_t stage_dim(int64_t i) const { return embed_dim << i; }
  int64_t stage_side(int64_t i) const { return (img_size / 4) >> i; }
  int64_t bottleneck_side() const { return img_size / 32; }

  // Collects every violation before throwing, so one round trip reports all
  // problems. Messages name config keys and offending values.
  void validate() const {
    std::vector<std::string> errs;
    auto bad = [&](const std::string& m) { errs.push_back(m); };
    if (img_size < 32 || img_size % 32 != 0)
      bad("img_size must be a positive multiple of 32, got " + std::to_string(img_size));
    if (in_channels < 1) bad("in_channels must be >= 1, got " + std::to_string(in_channels));
    if (num_classes < 2) bad("num_classes must be >= 2, got " + std::to_string(num_classes));
    if (embed_dim < 4 || embed_dim % 4 != 0)
      bad("embed_dim must be a positive multiple of 4, got " + std::to_string(embed_dim));
    if (mlp_ratio < 1) bad("mlp_ratio must be >= 1, got " + std::to_string(mlp_ratio));
    if (se_reduction < 1) bad("se_reduction must be >= 1, got " + std::to_string(se_reduction));
    if (drop_rate < 0 || drop_rate >= 1)
      bad("drop_rate must be in [0,1), got " + std::to_string(drop_rate));
    if (droppath_rate < 0 || droppath_rate >= 1)
      bad("droppath_rate must be in [0,1), got " + std::to_string(droppath_rate));
    if (depths.size() != 4) bad("depths must list 4 stages, got " + std::to_string(depths.size()));
    if (heads.size() != 4) bad("heads must list 4 stages, got " + std::to_string(heads.size()));
    if (windows.size() != 4)
      bad("windows must list 4 stages, got " + std::to_string(windows.size()));
    try {
      upsample_kind_from(upsample);
    } catch (const Error& e) {
      bad(e.what());
    }
    if (errs.empty()) {
      for (int64_t i = 0; i < 4; ++i) {
        int64_t d = stage_dim(i), side = stage_side(i), w = windows[static_cast<size_t>(i)];
        std::string si = std::to_string(i);
        if (depths[static_cast<size_t>(i)] < 1) bad("depths[" + si + "] must be >= 1");
        if (heads[static_cast<size_t>(i)] < 1)
          bad("heads[" + si + "] must be >= 1");
        else if (d % heads[static_cast<size_t>(i)] != 0)
          bad("stage " + si + " dim " + std::to_string(d) + " not divisible by heads[" + si +
              "]=" + std::to_string(heads[static_cast<size_t>(i)]));
        if (w < 1) {
          bad("windows[" + si + "] must be >= 1");
        } else if (side % w != 0) {
          bad("windows[" + si + "]=" + std::to_string(w) + " does not divide stage side " +
              std::to_string(side));
        } else {
          int64_t ratio = side / w;
          while (ratio > 1 && ratio % 2 == 0) ratio /= 2;
          if (ratio != 1)
            bad("stage side " + std::to_string(side) + " over windows[" + si + "]=" +
                std::to_string(w) + " must be a power of two");
        }
        if (d % se_reduction != 0 || d / se_reduction < 1)
          bad("stage " + si + " dim " + std::to_string(d) + " not divisible by se_reduction " +
              std::to_string(se_reduction));
      }
    }
    if (!errs.empty()) {
      std::string joined = "invalid model configuration:";
      for (const auto& e : errs) joined += "\n  - " + e;
      fail_config(joined);
    }
  }
};

// Profiler output; MACs are multiply-accumulates of the GEMM-backed ops
// (attention matmuls, linears, convolutions), FLOPs count each as two.
struct Profile {
  int64_t params = 0;
  int64_t macs_per_image = 0;
  int64_t flops_per_image = 0;
  int64_t batch = 1;
  int64_t flops_per_batch = 0;
};

template <class S>
struct GCtxUNet {
  ModelConfig cfg;
  Registry<S> params;

  struct BlockStage {
    std::vector<GcVitBlock<S>> blocks;
    GlobalTokenGen<S> gtg;
    bool any_global = false;

    Tensor<S> operator()(const Tensor<S>& x, Rng* rng) const {
      Tensor<S> qg;
      if (any_global) qg = gtg(x);
      Tensor<S> y = x;
      for (const auto& b : blocks) y = b(y, qg, rng);
      return y;
    }
  };

  PatchStem<S> stem;
  std::array<BlockStage, 3> enc;
  std::array<Downsample<S>, 3> down;
  BlockStage bottleneck;
  std::array<Upsample<S>, 3> up;       // indexed by the stage they return to
  std::array<Conv2dMod<S>, 3> fuse;    // 1x1 reduction after skip concat
  std::array<BlockStage, 3> dec;
  TconvMod<S> head_up1, head_up2;
  Conv2dMod<S> head_out;

  mutable Shape last_bottleneck_shape;

  explicit GCtxUNet(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    Rng rng(cfg.seed);
    stem = PatchStem<S>(params, rng, "stem", cfg.in_channels, cfg.embed_dim, cfg.se_reduction);
    for (int64_t i = 0; i < 3; ++i) {
      build_stage(enc[static_cast<size_t>(i)], rng, "enc" + std::to_string(i), i,
                  cfg.depths[static_cast<size_t>(i)]);
      down[static_cast<size_t>(i)] = Downsample<S>(params, rng, "enc" + std::to_string(i) + ".down",
                                                   cfg.stage_dim(i), cfg.se_reduction);
    }
    build_stage(bottleneck, rng, "bot", 3, cfg.depths[3]);
    UpsampleKind uk = upsample_kind_from(cfg.upsample);
    for (int64_t i = 2; i >= 0; --i) {
      std::string name = "dec" + std::to_string(i);
      up[static_cast<size_t>(i)] =
          Upsample<S>(params, rng, name + ".up", cfg.stage_dim(i + 1), cfg.se_reduction, uk);
      fuse[static_cast<size_t>(i)] = Conv2dMod<S>(params, rng, name + ".fuse",
                                                  2 * cfg.stage_dim(i), cfg.stage_dim(i), 1, 1, 0);
      build_stage(dec[static_cast<size_t>(i)], rng, name, i, 2);
    }
    head_up1 = TconvMod<S>(params, rng, "head.up1", cfg.embed_dim, cfg.embed_dim / 2, 2, 2);
    head_up2 = TconvMod<S>(params, rng, "head.up2", cfg.embed_dim / 2, cfg.embed_dim / 4, 2, 2);
    head_out = Conv2dMod<S>(params, rng, "head.out", cfg.embed_dim / 4, cfg.num_classes, 1, 1, 0);
  }

  // Blocks alternate local, global, local, ... within a stage. The query
  // token generator is built only when the stage has a global block.
  void build_stage(BlockStage& st, Rng& rng, const std::string& name, int64_t stage_idx,
                   int64_t depth) {
    int64_t dim = cfg.stage_dim(stage_idx);
    int64_t h = cfg.heads[static_cast<size_t>(stage_idx)];
    int64_t w = cfg.windows[static_cast<size_t>(stage_idx)];
    for (int64_t j = 0; j < depth; ++j) {
      bool global_query = j % 2 == 1;
      st.any_global = st.any_global || global_query;
      st.blocks.emplace_back(params, rng, name + ".block" + std::to_string(j), dim, h, w,
                             global_query, cfg.mlp_ratio, cfg.drop_rate, cfg.droppath_rate);
    }
    if (st.any_global)
      st.gtg = GlobalTokenGen<S>(params, rng, name + ".gtg", dim, h, w,
                                 cfg.stage_side(stage_idx), cfg.se_reduction);
  }

  // img: [B, in_channels, img_size, img_size] -> logits [B, num_classes, img_size, img_size]
  Tensor<S> forward(const Tensor<S>& img, Rng* rng = nullptr) const {
    if (img.rank() != 4 || img.dim(1) != cfg.in_channels || img.dim(2) != cfg.img_size ||
        img.dim(3) != cfg.img_size)
      fail_shape("model expects input [B," + std::to_string(cfg.in_channels) + "," +
                 std::to_string(cfg.img_size) + "," + std::to_string(cfg.img_size) + "], got " +
                 shape_str(img.shape()));
    Tensor<S> x = stem(img);
    std::array<Tensor<S>, 3> skips;
    for (size_t i = 0; i < 3; ++i) {
      x = enc[i](x, rng);
      skips[i] = x;
      x = down[i](x);
    }
    x = bottleneck(x, rng);
    last_bottleneck_shape = x.shape();
    for (int64_t i = 2; i >= 0; --i) {
      x = up[static_cast<size_t>(i)](x);
      x = fuse[static_cast<size_t>(i)](concat<S>({x, skips[static_cast<size_t>(i)]}, 1));
      x = dec[static_cast<size_t>(i)](x, rng);
    }
    x = gelu(head_up1(x));
    x = gelu(head_up2(x));
    return head_out(x);
  }

  int64_t count_params() const { return params.total_params(); }
};

template <class S>
Profile profile_model(const GCtxUNet<S>& model, int64_t batch) {
  if (batch < 1) fail(ErrorKind::usage, "profile batch must be >= 1");
  Profile p;
  p.params = model.count_params();
  p.batch = batch;
  Tensor<S> probe(Shape{1, model.cfg.in_channels, model.cfg.img_size, model.cfg.img_size});
  MacScope macs;
  model.forward(probe);
  p.macs_per_image = macs.macs();
  p.flops_per_image = 2 * p.macs_per_image;
  p.flops_per_batch = p.flops_per_image * batch;
  return p;
}

}  // namespace gcunet
