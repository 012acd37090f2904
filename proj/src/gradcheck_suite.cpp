#include "gcunet/gradcheck_suite.hpp"

#include "gcunet/losses.hpp"
#include "gcunet/model.hpp"

namespace gcunet {
namespace {

Tensor<double> rand_t(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  t.set_requires_grad(true);
  return t;
}

// values bounded away from zero, for ops with a kink at the origin
Tensor<double> rand_offzero(Rng& rng, Shape s) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) {
    double m = rng.uniform(0.2, 1.2);
    v = rng.below(2) ? m : -m;
  }
  t.set_requires_grad(true);
  return t;
}

// fixed random projection turns any tensor into a scalar loss without the
// cancellation a plain sum invites
Tensor<double> project(const Tensor<double>& y, uint64_t seed) {
  Rng r(seed);
  Tensor<double> p(y.shape());
  for (auto& v : p.values()) v = r.uniform(-1.0, 1.0);
  return mean_all(mul(y, p));
}

void randomize(Registry<double>& reg, Rng& rng, double scale) {
  for (auto& [_, t] : reg.items)
    for (auto& v : t.values()) v = rng.uniform(-scale, scale);
}

NamedParams named(const Registry<double>& reg) {
  return NamedParams(reg.items.begin(), reg.items.end());
}

}  // namespace

CheckReport gradcheck_ops() {
  CheckReport rep;
  Rng rng(1001);

  {
    Tensor<double> a = rand_t(rng, {2, 3});
    Tensor<double> b = rand_t(rng, {2, 3});
    rep.merge(fd_check("arith", [&] {
      Tensor<double> y = add(mul(a, b), sub(a, div(b, scalar_add(mul(b, b), 2.0))));
      return project(y, 11);
    }, {{"a", a}, {"b", b}}));
  }
  {
    Tensor<double> x = rand_offzero(rng, {3, 4});
    rep.merge(fd_check("relu", [&] { return project(relu(x), 12); }, {{"x", x}}));
  }
  {
    Tensor<double> x = rand_t(rng, {3, 4});
    rep.merge(fd_check("gelu", [&] { return project(gelu(x), 13); }, {{"x", x}}));
    rep.merge(fd_check("sigmoid", [&] { return project(sigmoid(x), 14); }, {{"x", x}}));
    rep.merge(fd_check("exp", [&] { return project(exp(x), 15); }, {{"x", x}}));
    rep.merge(fd_check("scalar_chain", [&] {
      return project(scalar_sub(1.0, scalar_mul(scalar_add(x, 0.5), 2.0)), 16);
    }, {{"x", x}}));
  }
  {
    Tensor<double> x = rand_t(rng, {3, 4}, 0.5, 2.0);
    rep.merge(fd_check("log", [&] { return project(log(x), 17); }, {{"x", x}}));
    rep.merge(fd_check("sqrt", [&] { return project(sqrt(x), 18); }, {{"x", x}}));
  }
  {
    Tensor<double> x = rand_t(rng, {2, 3, 4});
    rep.merge(fd_check("reduce_sum", [&] { return project(reduce_sum(x, {0, 2}), 19); }, {{"x", x}}));
    rep.merge(
        fd_check("reduce_sum_keepdim",
                 [&] { return project(reduce_sum(x, {1}, true), 20); }, {{"x", x}}));
    rep.merge(fd_check("reduce_mean", [&] { return project(reduce_mean(x, {2}), 21); }, {{"x", x}}));
    rep.merge(fd_check("mean_all", [&] { return mean_all(x); }, {{"x", x}}));
    rep.merge(fd_check("sum_all", [&] { return scalar_mul(sum_all(x), 0.25); }, {{"x", x}}));
    rep.merge(fd_check("reduce_max", [&] { return project(reduce_max(x, 1), 22); }, {{"x", x}}));
    rep.merge(fd_check("softmax", [&] { return project(softmax(x, 1), 23); }, {{"x", x}}));
    rep.merge(fd_check("log_softmax", [&] { return project(log_softmax(x, 2), 24); }, {{"x", x}}));
  }
  {
    Tensor<double> x = rand_t(rng, {2, 6});
    Tensor<double> g = rand_t(rng, {6}, 0.5, 1.5);
    Tensor<double> b = rand_t(rng, {6}, -0.5, 0.5);
    rep.merge(fd_check("layer_norm", [&] { return project(layer_norm(x, g, b), 25); },
                       {{"x", x}, {"gamma", g}, {"beta", b}}));
  }
  {
    Tensor<double> a = rand_t(rng, {2, 3, 4});
    Tensor<double> b = rand_t(rng, {2, 4, 5});
    rep.merge(fd_check("matmul", [&] { return project(matmul(a, b), 26); }, {{"a", a}, {"b", b}}));
  }
  {
    Tensor<double> x = rand_t(rng, {5, 4});
    Tensor<double> w = rand_t(rng, {6, 4});
    Tensor<double> b = rand_t(rng, {6});
    rep.merge(fd_check("linear", [&] { return project(linear(x, w, b), 27); },
                       {{"x", x}, {"w", w}, {"b", b}}));
  }
  {
    Tensor<double> x = rand_t(rng, {2, 3, 4});
    Tensor<double> y = rand_t(rng, {2, 2, 4});
    rep.merge(fd_check("reshape_permute", [&] {
      return project(permute(reshape(x, {2, 4, 3}), {1, 0, 2}), 28);
    }, {{"x", x}}));
    rep.merge(fd_check("concat", [&] { return project(concat<double>({x, y}, 1), 29); },
                       {{"x", x}, {"y", y}}));
  }
  {
    Tensor<double> x = rand_t(rng, {2, 2, 3, 2});
    rep.merge(fd_check("repeat_interleave0",
                       [&] { return project(repeat_interleave0(x, 3), 30); }, {{"x", x}}));
  }
  {
    Tensor<double> t = rand_t(rng, {4, 5});
    rep.merge(fd_check("index_rows", [&] {
      return project(index_rows(t, {2, 0, 2, 3, 1, 1}), 31);
    }, {{"t", t}}));
  }
  {
    Tensor<double> logits = rand_t(rng, {2, 3, 2, 2});
    LabelMask m(Shape{2, 2, 2});
    for (auto& v : m.v) v = static_cast<int32_t>(rng.below(3));
    rep.merge(fd_check("select_class",
                       [&] { return project(select_class(log_softmax(logits, 1), m), 32); },
                       {{"logits", logits}}));
  }
  {
    Tensor<double> x = rand_t(rng, {2, 3, 6, 6});
    Tensor<double> w = rand_t(rng, {4, 3, 3, 3}, -0.5, 0.5);
    Tensor<double> b = rand_t(rng, {4});
    rep.merge(fd_check("conv2d", [&] { return project(conv2d(x, w, b, 1, 1), 33); },
                       {{"x", x}, {"w", w}, {"b", b}}));
    rep.merge(fd_check("conv2d_strided", [&] { return project(conv2d(x, w, b, 2, 1), 34); },
                       {{"x", x}, {"w", w}, {"b", b}}));
  }
  {
    Tensor<double> x = rand_t(rng, {1, 4, 5, 5});
    Tensor<double> wg = rand_t(rng, {4, 2, 3, 3}, -0.5, 0.5);
    Tensor<double> wd = rand_t(rng, {4, 1, 3, 3}, -0.5, 0.5);
    Tensor<double> b = rand_t(rng, {4});
    rep.merge(fd_check("conv2d_grouped",
                       [&] { return project(conv2d(x, wg, b, 1, 1, 2), 35); },
                       {{"x", x}, {"w", wg}, {"b", b}}));
    rep.merge(fd_check("conv2d_depthwise",
                       [&] { return project(conv2d(x, wd, b, 1, 1, 4), 36); },
                       {{"x", x}, {"w", wd}, {"b", b}}));
  }
  {
    Tensor<double> x = rand_t(rng, {1, 3, 4, 4});
    Tensor<double> w = rand_t(rng, {3, 2, 2, 2}, -0.5, 0.5);
    Tensor<double> b = rand_t(rng, {2});
    rep.merge(fd_check("conv2d_transpose",
                       [&] { return project(conv2d_transpose(x, w, b, 2), 37); },
                       {{"x", x}, {"w", w}, {"b", b}}));
  }
  {
    Tensor<double> x = rand_offzero(rng, {1, 2, 4, 4});
    rep.merge(fd_check("maxpool2d", [&] { return project(maxpool2d(x, 3, 2, 1), 38); }, {{"x", x}}));
  }
  {
    Tensor<double> x = rand_t(rng, {1, 2, 4, 4});
    rep.merge(fd_check("bilinear_up", [&] { return project(bilinear_resize(x, 8, 8), 39); },
                       {{"x", x}}));
    rep.merge(fd_check("bilinear_down", [&] { return project(bilinear_resize(x, 3, 3), 40); },
                       {{"x", x}}));
    rep.merge(fd_check("global_avg_pool", [&] { return project(global_avg_pool(x), 41); },
                       {{"x", x}}));
  }
  {
    Tensor<double> t = rand_t(rng, {1, 4, 4, 3});
    rep.merge(fd_check("window_roundtrip", [&] {
      Tensor<double> w = window_partition_tokens(t, 2);
      return project(window_merge_tokens(mul(w, w), 2, 1, 4, 4), 42);
    }, {{"t", t}}));
  }
  return rep;
}

CheckReport gradcheck_blocks() {
  CheckReport rep;
  Rng rng(2002);
  const int64_t coords = 16;

  {
    Registry<double> reg;
    Rng init(3);
    FusedMBConv<double> fmb(reg, init, "fmb", 6, 3);
    randomize(reg, rng, 0.4);
    Tensor<double> x = rand_t(rng, {2, 6, 5, 5});
    rep.merge(fd_check("fused_mbconv", [&] { return project(fmb(x), 51); }, named(reg), 1e-4, coords));
  }
  {
    Registry<double> reg;
    Rng init(4);
    SqueezeExcite<double> se(reg, init, "se", 8, 4);
    randomize(reg, rng, 0.4);
    Tensor<double> x = rand_t(rng, {2, 8, 3, 3});
    rep.merge(fd_check("squeeze_excite", [&] { return project(se(x), 52); }, named(reg), 1e-4, coords));
  }
  {
    Registry<double> reg;
    Rng init(5);
    PatchStem<double> stem(reg, init, "stem", 3, 8, 4);
    randomize(reg, rng, 0.3);
    Tensor<double> x = rand_t(rng, {1, 3, 8, 8});
    rep.merge(fd_check("patch_stem", [&] { return project(stem(x), 53); }, named(reg), 1e-4, coords));
  }
  {
    Registry<double> reg;
    Rng init(6);
    Downsample<double> down(reg, init, "down", 4, 4);
    randomize(reg, rng, 0.3);
    Tensor<double> x = rand_t(rng, {1, 4, 6, 6});
    rep.merge(fd_check("downsample", [&] { return project(down(x), 54); }, named(reg), 1e-4, coords));
  }
  for (const char* kind : {"bilinear", "tconv_fmb_se"}) {
    Registry<double> reg;
    Rng init(7);
    Upsample<double> up(reg, init, "up", 8, 4, upsample_kind_from(kind));
    randomize(reg, rng, 0.3);
    Tensor<double> x = rand_t(rng, {1, 8, 4, 4});
    rep.merge(fd_check(std::string("upsample_") + kind, [&] { return project(up(x), 55); },
                       named(reg), 1e-4, coords));
  }
  {
    Registry<double> reg;
    Rng init(8);
    GcVitBlock<double> blk(reg, init, "blk", 8, 2, 2, false, 2, 0.0, 0.0);
    randomize(reg, rng, 0.3);
    Tensor<double> x = rand_t(rng, {1, 8, 4, 4});
    rep.merge(fd_check("block_local", [&] { return project(blk(x, {}, nullptr), 56); },
                       named(reg), 1e-4, coords));
  }
  {
    Registry<double> reg;
    Rng init(9);
    GlobalTokenGen<double> gtg(reg, init, "gtg", 8, 2, 2, 4, 4);
    GcVitBlock<double> blk(reg, init, "blk", 8, 2, 2, true, 2, 0.0, 0.0);
    randomize(reg, rng, 0.3);
    Tensor<double> x = rand_t(rng, {1, 8, 4, 4});
    rep.merge(fd_check("block_global", [&] { return project(blk(x, gtg(x), nullptr), 57); },
                       named(reg), 1e-4, coords));
  }
  return rep;
}

CheckReport gradcheck_model() {
  ModelConfig c;
  c.img_size = 32;
  c.embed_dim = 8;
  c.num_classes = 3;
  c.depths = {1, 1, 1, 2};
  c.heads = {2, 2, 2, 2};
  c.windows = {2, 2, 2, 1};
  c.seed = 3;
  GCtxUNet<double> model(c);
  Rng rng(9);
  Tensor<double> img = Tensor<double>::uniform({1, 3, 32, 32}, rng);
  LabelMask mask(Shape{1, 32, 32});
  for (auto& v : mask.v) v = static_cast<int32_t>(rng.below(3));
  auto fn = [&] { return combined_loss(model.forward(img), mask); };
  return fd_check("model_training_loss", fn, named(model.params), 1e-4, 2, 99);
}

CheckReport run_gradcheck(const std::string& scale) {
  if (scale == "ops") return gradcheck_ops();
  if (scale == "block") return gradcheck_blocks();
  if (scale == "model") return gradcheck_model();
  fail(ErrorKind::usage, "gradcheck scale must be ops, block or model, got '" + scale + "'");
}

}  // namespace gcunet
