#pragma once

#include <string>
#include <vector>

#include "gcunet/conv.hpp"
#include "gcunet/ops.hpp"

namespace gcunet {

// Named parameter registry. Modules register their tensors at construction;
// checkpointing and the optimizer walk the same ordered list. Handles are
// shared, so in-place updates through the registry are seen by the modules.
template <class S>
struct Registry {
  std::vector<std::pair<std::string, Tensor<S>>> items;

  Tensor<S> add(const std::string& name, Tensor<S> t) {
    for (const auto& [n, _] : items)
      if (n == name) fail(ErrorKind::usage, "duplicate parameter name: " + name);
    items.emplace_back(name, t);
    return t;
  }

  Tensor<S>* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [_, t] : items) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : items) t.zero_grad();
  }
};

template <class S>
Tensor<S> make_weight(Registry<S>& reg, Rng& rng, const std::string& name, Shape shape) {
  return reg.add(name, Tensor<S>::trunc_normal_param(std::move(shape), rng));
}

template <class S>
Tensor<S> make_zero_param(Registry<S>& reg, const std::string& name, Shape shape) {
  Tensor<S> t(std::move(shape), S(0));
  t.set_requires_grad(true);
  return reg.add(name, t);
}

template <class S>
Tensor<S> make_one_param(Registry<S>& reg, const std::string& name, Shape shape) {
  Tensor<S> t(std::move(shape), S(1));
  t.set_requires_grad(true);
  return reg.add(name, t);
}

// ---------------------------------------------------------------------------
// training-only stochastic regularizers (identity when rng is null or rate 0)

template <class S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng* rng) {
  if (!rng || p <= 0.0) return x;
  double keep = 1.0 - p;
  Tensor<S> mask(x.shape());
  for (auto& m : mask.values()) m = rng->uniform() < keep ? static_cast<S>(1.0 / keep) : S(0);
  return mul(x, mask);
}

// stochastic depth: drops the whole residual branch per sample
template <class S>
Tensor<S> drop_path(const Tensor<S>& x, double p, Rng* rng) {
  if (!rng || p <= 0.0) return x;
  double keep = 1.0 - p;
  Shape ms(static_cast<size_t>(x.rank()), 1);
  ms[0] = x.dim(0);
  Tensor<S> mask(ms);
  for (auto& m : mask.values()) m = rng->uniform() < keep ? static_cast<S>(1.0 / keep) : S(0);
  return mul(x, mask);
}

// ---------------------------------------------------------------------------
// basic parameterized modules

template <class S>
struct LinearMod {
  Tensor<S> w, b;
  LinearMod() = default;
  LinearMod(Registry<S>& reg, Rng& rng, const std::string& name, int64_t in, int64_t out)
      : w(make_weight(reg, rng, name + ".w", {out, in})),
        b(make_zero_param(reg, name + ".b", {out})) {}
  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, w, b); }
};

template <class S>
struct Conv2dMod {
  Tensor<S> w, b;
  int64_t stride = 1, pad = 0, groups = 1;
  Conv2dMod() = default;
  Conv2dMod(Registry<S>& reg, Rng& rng, const std::string& name, int64_t cin, int64_t cout,
            int64_t k, int64_t stride_, int64_t pad_, int64_t groups_ = 1)
      : w(make_weight(reg, rng, name + ".w", {cout, cin / groups_, k, k})),
        b(make_zero_param(reg, name + ".b", {cout})),
        stride(stride_),
        pad(pad_),
        groups(groups_) {}
  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, stride, pad, groups); }
};

template <class S>
struct TconvMod {
  Tensor<S> w, b;
  int64_t stride = 2;
  TconvMod() = default;
  TconvMod(Registry<S>& reg, Rng& rng, const std::string& name, int64_t cin, int64_t cout,
           int64_t k, int64_t stride_)
      : w(make_weight(reg, rng, name + ".w", {cin, cout, k, k})),
        b(make_zero_param(reg, name + ".b", {cout})),
        stride(stride_) {}
  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d_transpose(x, w, b, stride); }
};

template <class S>
struct LayerNormMod {
  Tensor<S> gamma, beta;
  LayerNormMod() = default;
  LayerNormMod(Registry<S>& reg, const std::string& name, int64_t dim)
      : gamma(make_one_param(reg, name + ".g", {dim})), beta(make_zero_param(reg, name + ".b", {dim})) {}
  // x: [..., dim]
  Tensor<S> tokens(const Tensor<S>& x) const { return layer_norm(x, gamma, beta); }
  // x: [B, dim, H, W]
  Tensor<S> nchw(const Tensor<S>& x) const {
    return permute(layer_norm(permute(x, {0, 2, 3, 1}), gamma, beta), {0, 3, 1, 2});
  }
};

// ---------------------------------------------------------------------------
// squeeze-excite: GAP -> reduce -> gelu -> expand -> sigmoid -> scale

template <class S>
struct SqueezeExcite {
  LinearMod<S> fc1, fc2;
  SqueezeExcite() = default;
  SqueezeExcite(Registry<S>& reg, Rng& rng, const std::string& name, int64_t dim,
                int64_t reduction)
      : fc1(reg, rng, name + ".fc1", dim, dim / reduction),
        fc2(reg, rng, name + ".fc2", dim / reduction, dim) {}
  Tensor<S> operator()(const Tensor<S>& x) const {
    int64_t B = x.dim(0), C = x.dim(1);
    Tensor<S> s = global_avg_pool(x);                 // [B,C]
    s = sigmoid(fc2(gelu(fc1(s))));                   // [B,C]
    return mul(x, reshape(s, {B, C, 1, 1}));
  }
};

// ---------------------------------------------------------------------------
// fused MBConv: depthwise 3x3 -> gelu -> squeeze-excite -> 1x1 conv, with a
// skip connection around the whole thing; channels preserved.

template <class S>
struct FusedMBConv {
  Conv2dMod<S> dw, pw;
  SqueezeExcite<S> se;
  bool use_se = true;
  FusedMBConv() = default;
  FusedMBConv(Registry<S>& reg, Rng& rng, const std::string& name, int64_t dim, int64_t reduction,
              bool use_se_ = true)
      : dw(reg, rng, name + ".dw", dim, dim, 3, 1, 1, dim),
        pw(reg, rng, name + ".pw", dim, dim, 1, 1, 0),
        use_se(use_se_) {
    if (use_se) se = SqueezeExcite<S>(reg, rng, name + ".se", dim, reduction);
  }
  Tensor<S> operator()(const Tensor<S>& x) const {
    Tensor<S> h = gelu(dw(x));
    if (use_se) h = se(h);
    return add(x, pw(h));
  }
};

// ---------------------------------------------------------------------------
// stage transitions

// fused-MBConv, then a strided 3x3 conv doubling channels, then layer norm;
// halves both spatial extents.
template <class S>
struct Downsample {
  FusedMBConv<S> fmb;
  Conv2dMod<S> conv;
  LayerNormMod<S> norm;
  Downsample() = default;
  Downsample(Registry<S>& reg, Rng& rng, const std::string& name, int64_t dim, int64_t reduction)
      : fmb(reg, rng, name + ".fmb", dim, reduction),
        conv(reg, rng, name + ".conv", dim, 2 * dim, 3, 2, 1),
        norm(reg, name + ".norm", 2 * dim) {}
  Tensor<S> operator()(const Tensor<S>& x) const { return norm.nchw(conv(fmb(x))); }
};

// overlapping patch stem: strided conv to dim, fused-MBConv, second strided
// conv; maps [B,in,S,S] to [B,dim,S/4,S/4].
template <class S>
struct PatchStem {
  Conv2dMod<S> conv1, conv2;
  FusedMBConv<S> fmb;
  LayerNormMod<S> norm;
  PatchStem() = default;
  PatchStem(Registry<S>& reg, Rng& rng, const std::string& name, int64_t in_ch, int64_t dim,
            int64_t reduction)
      : conv1(reg, rng, name + ".conv1", in_ch, dim, 3, 2, 1),
        conv2(reg, rng, name + ".conv2", dim, dim, 3, 2, 1),
        fmb(reg, rng, name + ".fmb", dim, reduction),
        norm(reg, name + ".norm", dim) {}
  Tensor<S> operator()(const Tensor<S>& x) const { return norm.nchw(conv2(fmb(conv1(x)))); }
};

enum class UpsampleKind { bilinear, bilinear_se, tconv_fmb, tconv_fmb_se };

inline UpsampleKind upsample_kind_from(const std::string& s) {
  if (s == "bilinear") return UpsampleKind::bilinear;
  if (s == "bilinear_se") return UpsampleKind::bilinear_se;
  if (s == "tconv_fmb") return UpsampleKind::tconv_fmb;
  if (s == "tconv_fmb_se") return UpsampleKind::tconv_fmb_se;
  fail_config("unknown upsample variant '" + s +
              "' (expected bilinear, bilinear_se, tconv_fmb or tconv_fmb_se)");
}

// doubles spatial extents and halves channels, then layer-normalizes; the
// interpolating variants reduce channels with a 1x1 conv, the transposed-conv
// variants refine with a fused-MBConv at the output width (SE optional)
template <class S>
struct Upsample {
  UpsampleKind kind = UpsampleKind::tconv_fmb_se;
  Conv2dMod<S> reduce;    // bilinear*: 1x1 channel reduction
  SqueezeExcite<S> se;    // bilinear_se
  TconvMod<S> tconv;      // tconv_fmb*
  FusedMBConv<S> fmb;     // tconv_fmb*
  LayerNormMod<S> norm;
  Upsample() = default;
  Upsample(Registry<S>& reg, Rng& rng, const std::string& name, int64_t dim, int64_t reduction,
           UpsampleKind kind_)
      : kind(kind_) {
    if (dim % 2 != 0) fail_config("upsample needs an even channel count, got " + std::to_string(dim));
    switch (kind) {
      case UpsampleKind::bilinear:
        reduce = Conv2dMod<S>(reg, rng, name + ".reduce", dim, dim / 2, 1, 1, 0);
        break;
      case UpsampleKind::bilinear_se:
        reduce = Conv2dMod<S>(reg, rng, name + ".reduce", dim, dim / 2, 1, 1, 0);
        se = SqueezeExcite<S>(reg, rng, name + ".se", dim / 2, reduction);
        break;
      case UpsampleKind::tconv_fmb:
        tconv = TconvMod<S>(reg, rng, name + ".tconv", dim, dim / 2, 2, 2);
        fmb = FusedMBConv<S>(reg, rng, name + ".fmb", dim / 2, reduction, false);
        break;
      case UpsampleKind::tconv_fmb_se:
        tconv = TconvMod<S>(reg, rng, name + ".tconv", dim, dim / 2, 2, 2);
        fmb = FusedMBConv<S>(reg, rng, name + ".fmb", dim / 2, reduction, true);
        break;
    }
    norm = LayerNormMod<S>(reg, name + ".norm", dim / 2);
  }
  Tensor<S> operator()(const Tensor<S>& x) const {
    int64_t H = x.dim(2), W = x.dim(3);
    Tensor<S> y;
    switch (kind) {
      case UpsampleKind::bilinear:
        y = reduce(bilinear_resize(x, 2 * H, 2 * W));
        break;
      case UpsampleKind::bilinear_se:
        y = se(reduce(bilinear_resize(x, 2 * H, 2 * W)));
        break;
      case UpsampleKind::tconv_fmb:
      case UpsampleKind::tconv_fmb_se:
        y = fmb(tconv(x));
        break;
    }
    return norm.nchw(y);
  }
};

// ---------------------------------------------------------------------------
// windows over token maps

// [B,H,W,C] -> [B*nw, w*w, C], windows ordered batch-major then row-major
template <class S>
Tensor<S> window_partition_tokens(const Tensor<S>& t, int64_t w) {
  int64_t B = t.dim(0), H = t.dim(1), W = t.dim(2), C = t.dim(3);
  if (H % w != 0 || W % w != 0)
    fail_shape("window size " + std::to_string(w) + " does not divide token map " +
               shape_str(t.shape()));
  Tensor<S> r = reshape(t, {B, H / w, w, W / w, w, C});
  r = permute(r, {0, 1, 3, 2, 4, 5});
  return reshape(r, {B * (H / w) * (W / w), w * w, C});
}

template <class S>
Tensor<S> window_merge_tokens(const Tensor<S>& wins, int64_t w, int64_t B, int64_t H, int64_t W) {
  int64_t C = wins.dim(2);
  if (wins.dim(0) != B * (H / w) * (W / w) || wins.dim(1) != w * w)
    fail_shape("window_merge_tokens: " + shape_str(wins.shape()) + " does not tile " +
               std::to_string(H) + "x" + std::to_string(W));
  Tensor<S> r = reshape(wins, {B, H / w, W / w, w, w, C});
  r = permute(r, {0, 1, 3, 2, 4, 5});
  return reshape(r, {B, H, W, C});
}

// [B,C,H,W] convenience wrappers
template <class S>
Tensor<S> window_partition(const Tensor<S>& x, int64_t w) {
  return window_partition_tokens(permute(x, {0, 2, 3, 1}), w);
}

template <class S>
Tensor<S> window_merge(const Tensor<S>& wins, int64_t w, int64_t B, int64_t H, int64_t W) {
  return permute(window_merge_tokens(wins, w, B, H, W), {0, 3, 1, 2});
}

// ---------------------------------------------------------------------------
// learned relative position bias for a w x w token window

inline std::vector<int64_t> relpos_index(int64_t w) {
  int64_t T = w * w, span = 2 * w - 1;
  std::vector<int64_t> idx(static_cast<size_t>(T * T));
  for (int64_t a = 0; a < T; ++a)
    for (int64_t b = 0; b < T; ++b) {
      int64_t dy = a / w - b / w + w - 1;
      int64_t dx = a % w - b % w + w - 1;
      idx[static_cast<size_t>(a * T + b)] = dy * span + dx;
    }
  return idx;
}

template <class S>
struct RelPosBias {
  Tensor<S> table;  // [(2w-1)^2, heads]
  std::vector<int64_t> index;
  int64_t window = 0, heads = 0;
  RelPosBias() = default;
  RelPosBias(Registry<S>& reg, Rng& rng, const std::string& name, int64_t w, int64_t heads_)
      : table(make_weight(reg, rng, name + ".table", {(2 * w - 1) * (2 * w - 1), heads_})),
        index(relpos_index(w)),
        window(w),
        heads(heads_) {}
  // [heads, T, T], broadcastable over the window batch
  Tensor<S> operator()() const {
    int64_t T = window * window;
    return permute(reshape(index_rows(table, index), {T, T, heads}), {2, 0, 1});
  }
};

// ---------------------------------------------------------------------------
// windowed multi-head self-attention. Local blocks project q from the window
// itself; global blocks take q from the stage-wide query tokens and only
// project k and v.

template <class S>
struct WindowAttention {
  int64_t dim = 0, heads = 0, window = 0;
  bool global_query = false;
  double scale = 1.0, drop_rate = 0.0;
  LinearMod<S> qkv;   // local: packed q,k,v
  LinearMod<S> kv;    // global: packed k,v
  LinearMod<S> proj;
  RelPosBias<S> bias;

  WindowAttention() = default;
  WindowAttention(Registry<S>& reg, Rng& rng, const std::string& name, int64_t dim_,
                  int64_t heads_, int64_t window_, bool global_query_, double drop_rate_)
      : dim(dim_),
        heads(heads_),
        window(window_),
        global_query(global_query_),
        scale(1.0 / std::sqrt(static_cast<double>(dim_ / heads_))),
        drop_rate(drop_rate_) {
    if (dim % heads != 0)
      fail_config("attention dim " + std::to_string(dim) + " not divisible by heads " +
                  std::to_string(heads));
    if (global_query)
      kv = LinearMod<S>(reg, rng, name + ".kv", dim, 2 * dim);
    else
      qkv = LinearMod<S>(reg, rng, name + ".qkv", dim, 3 * dim);
    proj = LinearMod<S>(reg, rng, name + ".proj", dim, dim);
    bias = RelPosBias<S>(reg, rng, name + ".relpos", window, heads);
  }

  // [N,T,C] -> [N,heads,T,hd]
  Tensor<S> split_heads(const Tensor<S>& t) const {
    return permute(reshape(t, {t.dim(0), t.dim(1), heads, dim / heads}), {0, 2, 1, 3});
  }

  // windows: [N, T, C]; q_global: [B, heads, T, hd] with N == B * windows_per_image
  Tensor<S> operator()(const Tensor<S>& windows, const Tensor<S>& q_global, Rng* rng) const {
    int64_t N = windows.dim(0), T = windows.dim(1);
    if (T != window * window)
      fail_shape("attention got " + std::to_string(T) + " tokens for window " +
                 std::to_string(window));
    Tensor<S> q, k, v;
    if (global_query) {
      if (!q_global.defined()) fail(ErrorKind::usage, "global attention requires query tokens");
      if (q_global.rank() != 4 || q_global.dim(1) != heads || q_global.dim(2) != T ||
          q_global.dim(3) != dim / heads || N % q_global.dim(0) != 0)
        fail_shape("global query tokens " + shape_str(q_global.shape()) +
                   " do not match windows " + shape_str(windows.shape()));
      auto parts = split(kv(windows), {dim, dim}, 2);
      k = split_heads(parts[0]);
      v = split_heads(parts[1]);
      q = repeat_interleave0(q_global, N / q_global.dim(0));
    } else {
      auto parts = split(qkv(windows), {dim, dim, dim}, 2);
      q = split_heads(parts[0]);
      k = split_heads(parts[1]);
      v = split_heads(parts[2]);
    }
    Tensor<S> attn = matmul(scalar_mul(q, scale), permute(k, {0, 1, 3, 2}));  // [N,h,T,T]
    attn = add(attn, bias());
    attn = softmax(attn, 3);
    Tensor<S> out = matmul(attn, v);                                          // [N,h,T,hd]
    out = reshape(permute(out, {0, 2, 1, 3}), {N, T, dim});
    return dropout(proj(out), drop_rate, rng);
  }
};

template <class S>
struct Mlp {
  LinearMod<S> fc1, fc2;
  double drop_rate = 0.0;
  Mlp() = default;
  Mlp(Registry<S>& reg, Rng& rng, const std::string& name, int64_t dim, int64_t hidden,
      double drop_rate_)
      : fc1(reg, rng, name + ".fc1", dim, hidden),
        fc2(reg, rng, name + ".fc2", hidden, dim),
        drop_rate(drop_rate_) {}
  Tensor<S> operator()(const Tensor<S>& x, Rng* rng) const {
    return dropout(fc2(dropout(gelu(fc1(x)), drop_rate, rng)), drop_rate, rng);
  }
};

// ---------------------------------------------------------------------------
// one transformer block: pre-norm attention over windows, then pre-norm MLP,
// both with residuals (and optional stochastic depth).

template <class S>
struct GcVitBlock {
  int64_t dim = 0, window = 0;
  bool global_query = false;
  double droppath_rate = 0.0;
  LayerNormMod<S> norm1, norm2;
  WindowAttention<S> attn;
  Mlp<S> mlp;

  GcVitBlock() = default;
  GcVitBlock(Registry<S>& reg, Rng& rng, const std::string& name, int64_t dim_, int64_t heads,
             int64_t window_, bool global_query_, int64_t mlp_ratio, double drop_rate,
             double droppath_rate_)
      : dim(dim_),
        window(window_),
        global_query(global_query_),
        droppath_rate(droppath_rate_),
        norm1(reg, name + ".norm1", dim_),
        norm2(reg, name + ".norm2", dim_),
        attn(reg, rng, name + ".attn", dim_, heads, window_, global_query_, drop_rate),
        mlp(reg, rng, name + ".mlp", dim_, dim_ * mlp_ratio, drop_rate) {}

  // x: [B,C,H,W]; q_global: [B,heads,T,hd] (ignored by local blocks)
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& q_global, Rng* rng) const {
    int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
    Tensor<S> t = permute(x, {0, 2, 3, 1});  // [B,H,W,C]
    Tensor<S> wins = window_partition_tokens(norm1.tokens(t), window);
    Tensor<S> a = attn(wins, global_query ? q_global : Tensor<S>(), rng);
    t = add(t, drop_path(window_merge_tokens(a, window, B, H, W), droppath_rate, rng));
    t = add(t, drop_path(mlp(norm2.tokens(t), rng), droppath_rate, rng));
    return permute(t, {0, 3, 1, 2});
  }
};

// ---------------------------------------------------------------------------
// global token generator: repeated (fused-MBConv, 3x3/2 max-pool) reductions
// from the stage map down to one window, reshaped into per-head query tokens.

template <class S>
struct GlobalTokenGen {
  int64_t dim = 0, heads = 0, window = 0, reductions = 0;
  std::vector<FusedMBConv<S>> fmbs;

  GlobalTokenGen() = default;
  GlobalTokenGen(Registry<S>& reg, Rng& rng, const std::string& name, int64_t dim_, int64_t heads_,
                 int64_t window_, int64_t side, int64_t se_reduction)
      : dim(dim_), heads(heads_), window(window_) {
    if (side % window != 0) fail_config("stage side " + std::to_string(side) +
                                        " not divisible by window " + std::to_string(window));
    int64_t ratio = side / window;
    while (ratio > 1) {
      if (ratio % 2 != 0)
        fail_config("stage side " + std::to_string(side) + " over window " +
                    std::to_string(window) + " must be a power of two");
      ratio /= 2;
      ++reductions;
    }
    for (int64_t r = 0; r < reductions; ++r)
      fmbs.emplace_back(reg, rng, name + ".fmb" + std::to_string(r), dim, se_reduction);
  }

  // x: [B,C,side,side] -> [B, heads, window^2, dim/heads]
  Tensor<S> operator()(const Tensor<S>& x) const {
    Tensor<S> y = x;
    for (const auto& fmb : fmbs) y = maxpool2d(fmb(y), 3, 2, 1);
    int64_t B = y.dim(0), T = window * window;
    if (y.dim(2) != window || y.dim(3) != window)
      fail_shape("query tokens reduced to " + shape_str(y.shape()) + ", expected window " +
                 std::to_string(window));
    Tensor<S> t = reshape(permute(y, {0, 2, 3, 1}), {B, T, heads, dim / heads});
    return permute(t, {0, 2, 1, 3});
  }
};

}  // namespace gcunet
