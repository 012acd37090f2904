#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "gcunet/ops.hpp"

namespace gcunet {

// im-space is the [C,H,W] image, col-space the [C*kh*kw, Ho*Wo] patch matrix
// on the (stride, pad) grid. col2im is the transpose (it accumulates).
template <class S>
void im2col(const S* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t Ho, int64_t Wo, S* col) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t p = 0; p < kh; ++p)
      for (int64_t q = 0; q < kw; ++q) {
        S* row = col + ((c * kh + p) * kw + q) * Ho * Wo;
        for (int64_t i = 0; i < Ho; ++i) {
          int64_t y = i * stride + p - pad;
          if (y < 0 || y >= H) {
            std::fill(row + i * Wo, row + (i + 1) * Wo, S(0));
            continue;
          }
          const S* src = x + (c * H + y) * W;
          for (int64_t j = 0; j < Wo; ++j) {
            int64_t xx = j * stride + q - pad;
            row[i * Wo + j] = (xx < 0 || xx >= W) ? S(0) : src[xx];
          }
        }
      }
}

template <class S>
void col2im(const S* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t Ho, int64_t Wo, S* x) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t p = 0; p < kh; ++p)
      for (int64_t q = 0; q < kw; ++q) {
        const S* row = col + ((c * kh + p) * kw + q) * Ho * Wo;
        for (int64_t i = 0; i < Ho; ++i) {
          int64_t y = i * stride + p - pad;
          if (y < 0 || y >= H) continue;
          S* dst = x + (c * H + y) * W;
          for (int64_t j = 0; j < Wo; ++j) {
            int64_t xx = j * stride + q - pad;
            if (xx >= 0 && xx < W) dst[xx] += row[i * Wo + j];
          }
        }
      }
}

// Grouped 2d cross-correlation, zero padding.
//   x: [B, Cin, H, W], w: [O, Cin/groups, kh, kw], bias: [O] or undefined.
// Depthwise (groups == Cin == O) runs a direct loop; everything else goes
// through im2col + GEMM. Both accumulate in fixed order.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int64_t stride,
                 int64_t pad, int64_t groups = 1) {
  if (x.rank() != 4 || w.rank() != 4) fail_shape("conv2d expects x [B,C,H,W] and w [O,C/g,kh,kw]");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t O = w.dim(0), Cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (stride < 1) fail_shape("conv2d stride must be >= 1");
  if (pad < 0) fail_shape("conv2d pad must be >= 0");
  if (groups < 1 || C % groups != 0 || O % groups != 0)
    fail_shape("conv2d: channels " + std::to_string(C) + " / filters " + std::to_string(O) +
               " not divisible by groups " + std::to_string(groups));
  if (Cg != C / groups)
    fail_shape("conv2d weight expects " + std::to_string(C / groups) + " input channels per group, got " +
               std::to_string(Cg));
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    fail_shape("conv2d kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
               " larger than padded input " + shape_str(x.shape()));
  bool with_bias = bias.defined();
  if (with_bias && (bias.rank() != 1 || bias.dim(0) != O)) fail_shape("conv2d bias must be [O]");
  Tensor<S> out(Shape{B, O, Ho, Wo});
  const S* px = x.data();
  const S* pw = w.data();
  S* po = out.data();
  int64_t hw = Ho * Wo;
  bool depthwise = groups == C && O == C;
  count_macs(B * O * Cg * kh * kw * hw);
  if (depthwise) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const S* xin = px + (b * C + c) * H * W;
        const S* ker = pw + c * kh * kw;
        S* yout = po + (b * C + c) * hw;
        for (int64_t i = 0; i < Ho; ++i)
          for (int64_t j = 0; j < Wo; ++j) {
            S acc = 0;
            for (int64_t p = 0; p < kh; ++p) {
              int64_t y = i * stride + p - pad;
              if (y < 0 || y >= H) continue;
              for (int64_t q = 0; q < kw; ++q) {
                int64_t xx = j * stride + q - pad;
                if (xx < 0 || xx >= W) continue;
                acc += xin[y * W + xx] * ker[p * kw + q];
              }
            }
            yout[i * Wo + j] = acc;
          }
      }
  } else {
    int64_t crows = C * kh * kw;
    int64_t grows = Cg * kh * kw;
    int64_t Og = O / groups;
    std::vector<S> col(static_cast<size_t>(crows * hw));
    for (int64_t b = 0; b < B; ++b) {
      im2col(px + b * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
      for (int64_t g = 0; g < groups; ++g) {
        ECMap<S> Wm(pw + g * Og * grows, Og, grows);
        ECMap<S> Cm(col.data() + g * grows * hw, grows, hw);
        EMap<S> Om(po + (b * O + g * Og) * hw, Og, hw);
        Om.noalias() = Wm * Cm;
      }
    }
  }
  if (with_bias) {
    const S* pb = bias.data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t o = 0; o < O; ++o) {
        S v = pb[o];
        S* dst = po + (b * O + o) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] += v;
      }
  }
  check_finite(out, "conv2d");
  bool nb = with_bias && bias.requires_grad();
  if (tape_active<S>() && (x.requires_grad() || w.requires_grad() || nb)) {
    bool nx = x.requires_grad(), nw = w.requires_grad();
    auto xn = x.node(), wn = w.node(), on = out.node();
    std::shared_ptr<TensorData<S>> bn = with_bias ? bias.node() : nullptr;
    record_node(out, "conv2d",
                [xn, wn, bn, on, B, C, H, W, O, Cg, kh, kw, stride, pad, Ho, Wo, groups, depthwise,
                 nx, nw, nb]() {
                  if (on->g.empty()) return;
                  const S* px = xn->v.data();
                  const S* pw = wn->v.data();
                  const S* go = on->g.data();
                  int64_t hw = Ho * Wo;
                  if (depthwise) {
                    std::vector<S> wtmp, xtmp;
                    if (nw) wtmp.assign(static_cast<size_t>(C * kh * kw), S(0));
                    if (nx) xtmp.assign(static_cast<size_t>(B * C * H * W), S(0));
                    for (int64_t b = 0; b < B; ++b)
                      for (int64_t c = 0; c < C; ++c) {
                        const S* xin = px + (b * C + c) * H * W;
                        const S* ker = pw + c * kh * kw;
                        const S* g = go + (b * C + c) * hw;
                        for (int64_t i = 0; i < Ho; ++i)
                          for (int64_t j = 0; j < Wo; ++j) {
                            S gv = g[i * Wo + j];
                            if (gv == S(0)) continue;
                            for (int64_t p = 0; p < kh; ++p) {
                              int64_t y = i * stride + p - pad;
                              if (y < 0 || y >= H) continue;
                              for (int64_t q = 0; q < kw; ++q) {
                                int64_t xx = j * stride + q - pad;
                                if (xx < 0 || xx >= W) continue;
                                if (nw)
                                  wtmp[static_cast<size_t>(c * kh * kw + p * kw + q)] +=
                                      gv * xin[y * W + xx];
                                if (nx)
                                  xtmp[static_cast<size_t>((b * C + c) * H * W + y * W + xx)] +=
                                      gv * ker[p * kw + q];
                              }
                            }
                          }
                      }
                    if (nw) {
                      GradSink<S> gw(wn);
                      for (size_t i = 0; i < wtmp.size(); ++i) gw.add(static_cast<int64_t>(i), wtmp[i]);
                    }
                    if (nx) {
                      GradSink<S> gx(xn);
                      for (size_t i = 0; i < xtmp.size(); ++i) gx.add(static_cast<int64_t>(i), xtmp[i]);
                    }
                  } else {
                    int64_t crows = C * kh * kw;
                    int64_t grows = Cg * kh * kw;
                    int64_t Og = O / groups;
                    std::vector<S> col(static_cast<size_t>(crows * hw));
                    std::vector<S> gcol(static_cast<size_t>(crows * hw));
                    std::vector<S> wtmp, xtmp;
                    if (nw) wtmp.assign(static_cast<size_t>(O * grows), S(0));
                    if (nx) xtmp.assign(static_cast<size_t>(B * C * H * W), S(0));
                    for (int64_t b = 0; b < B; ++b) {
                      if (nw)
                        im2col(px + b * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
                      for (int64_t g = 0; g < groups; ++g) {
                        ECMap<S> Gm(go + (b * O + g * Og) * hw, Og, hw);
                        if (nw) {
                          ECMap<S> Cm(col.data() + g * grows * hw, grows, hw);
                          EMap<S> Wt(wtmp.data() + g * Og * grows, Og, grows);
                          Wt.noalias() += Gm * Cm.transpose();
                        }
                        if (nx) {
                          ECMap<S> Wm(pw + g * Og * grows, Og, grows);
                          EMap<S> Gc(gcol.data() + g * grows * hw, grows, hw);
                          Gc.noalias() = Wm.transpose() * Gm;
                        }
                      }
                      if (nx)
                        col2im(gcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               xtmp.data() + b * C * H * W);
                    }
                    if (nw) {
                      GradSink<S> gw(wn);
                      for (size_t i = 0; i < wtmp.size(); ++i) gw.add(static_cast<int64_t>(i), wtmp[i]);
                    }
                    if (nx) {
                      GradSink<S> gx(xn);
                      for (size_t i = 0; i < xtmp.size(); ++i) gx.add(static_cast<int64_t>(i), xtmp[i]);
                    }
                  }
                  if (nb) {
                    GradSink<S> gb(bn);
                    for (int64_t b = 0; b < B; ++b)
                      for (int64_t o = 0; o < O; ++o) {
                        S acc = 0;
                        const S* g = go + (b * O + o) * hw;
                        for (int64_t i = 0; i < hw; ++i) acc += g[i];
                        gb.add(o, acc);
                      }
                  }
                });
  }
  return out;
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int64_t stride, int64_t pad,
                 int64_t groups = 1) {
  return conv2d(x, w, Tensor<S>(), stride, pad, groups);
}

// Transposed convolution (adjoint of an unpadded strided conv2d).
//   x: [B, I, H, W], w: [I, O, kh, kw] -> [B, O, (H-1)*stride+kh, (W-1)*stride+kw]
template <class S>
Tensor<S> conv2d_transpose(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                           int64_t stride) {
  if (x.rank() != 4 || w.rank() != 4)
    fail_shape("conv2d_transpose expects x [B,I,H,W] and w [I,O,kh,kw]");
  int64_t B = x.dim(0), I = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Iw = w.dim(0), O = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (stride < 1) fail_shape("conv2d_transpose stride must be >= 1");
  if (Iw != I)
    fail_shape("conv2d_transpose weight expects " + std::to_string(I) + " input channels, got " +
               std::to_string(Iw));
  bool with_bias = bias.defined();
  if (with_bias && (bias.rank() != 1 || bias.dim(0) != O))
    fail_shape("conv2d_transpose bias must be [O]");
  int64_t Ho = (H - 1) * stride + kh;
  int64_t Wo = (W - 1) * stride + kw;
  Tensor<S> out(Shape{B, O, Ho, Wo});
  const S* px = x.data();
  const S* pw = w.data();
  S* po = out.data();
  int64_t hw = H * W;
  int64_t orows = O * kh * kw;
  count_macs(B * I * orows * hw);
  std::vector<S> col(static_cast<size_t>(orows * hw));
  ECMap<S> Wm(pw, I, orows);
  for (int64_t b = 0; b < B; ++b) {
    ECMap<S> Xm(px + b * I * hw, I, hw);
    EMap<S> Cm(col.data(), orows, hw);
    Cm.noalias() = Wm.transpose() * Xm;
    col2im(col.data(), O, Ho, Wo, kh, kw, stride, /*pad=*/0, H, W, po + b * O * Ho * Wo);
  }
  if (with_bias) {
    const S* pb = bias.data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t o = 0; o < O; ++o) {
        S v = pb[o];
        S* dst = po + (b * O + o) * Ho * Wo;
        for (int64_t i = 0; i < Ho * Wo; ++i) dst[i] += v;
      }
  }
  check_finite(out, "conv2d_transpose");
  bool nb = with_bias && bias.requires_grad();
  if (tape_active<S>() && (x.requires_grad() || w.requires_grad() || nb)) {
    bool nx = x.requires_grad(), nw = w.requires_grad();
    auto xn = x.node(), wn = w.node(), on = out.node();
    std::shared_ptr<TensorData<S>> bn = with_bias ? bias.node() : nullptr;
    record_node(out, "conv2d_transpose",
                [xn, wn, bn, on, B, I, H, W, O, kh, kw, stride, Ho, Wo, nx, nw, nb]() {
                  if (on->g.empty()) return;
                  const S* px = xn->v.data();
                  const S* pw = wn->v.data();
                  const S* go = on->g.data();
                  int64_t hw = H * W;
                  int64_t orows = O * kh * kw;
                  std::vector<S> gcol(static_cast<size_t>(orows * hw));
                  std::vector<S> wtmp, xtmp;
                  if (nw) wtmp.assign(static_cast<size_t>(I * orows), S(0));
                  if (nx) xtmp.assign(static_cast<size_t>(B * I * hw), S(0));
                  for (int64_t b = 0; b < B; ++b) {
                    im2col(go + b * O * Ho * Wo, O, Ho, Wo, kh, kw, stride, 0, H, W, gcol.data());
                    ECMap<S> Gc(gcol.data(), orows, hw);
                    if (nx) {
                      ECMap<S> Wm(pw, I, orows);
                      EMap<S> Xt(xtmp.data() + b * I * hw, I, hw);
                      Xt.noalias() = Wm * Gc;
                    }
                    if (nw) {
                      ECMap<S> Xm(px + b * I * hw, I, hw);
                      EMap<S> Wt(wtmp.data(), I, orows);
                      Wt.noalias() += Xm * Gc.transpose();
                    }
                  }
                  if (nw) {
                    GradSink<S> gw(wn);
                    for (size_t i = 0; i < wtmp.size(); ++i) gw.add(static_cast<int64_t>(i), wtmp[i]);
                  }
                  if (nx) {
                    GradSink<S> gx(xn);
                    for (size_t i = 0; i < xtmp.size(); ++i) gx.add(static_cast<int64_t>(i), xtmp[i]);
                  }
                  if (nb) {
                    GradSink<S> gb(bn);
                    for (int64_t b = 0; b < B; ++b)
                      for (int64_t o = 0; o < O; ++o) {
                        S acc = 0;
                        const S* g = go + (b * O + o) * Ho * Wo;
                        for (int64_t i = 0; i < Ho * Wo; ++i) acc += g[i];
                        gb.add(o, acc);
                      }
                  }
                });
  }
  return out;
}

template <class S>
Tensor<S> conv2d_transpose(const Tensor<S>& x, const Tensor<S>& w, int64_t stride) {
  return conv2d_transpose(x, w, Tensor<S>(), stride);
}

// Max pooling; padding cells never win (max over valid cells only), ties keep
// the first (row-major) maximum.
template <class S>
Tensor<S> maxpool2d(const Tensor<S>& x, int64_t k, int64_t stride, int64_t pad) {
  if (x.rank() != 4) fail_shape("maxpool2d expects [B,C,H,W]");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k < 1 || stride < 1 || pad < 0 || pad >= k) fail_shape("maxpool2d: bad window arguments");
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho < 1 || Wo < 1) fail_shape("maxpool2d window larger than input");
  Tensor<S> out(Shape{B, C, Ho, Wo});
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  const S* px = x.data();
  S* po = out.data();
  int64_t oi = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const S* xin = px + (b * C + c) * H * W;
      for (int64_t i = 0; i < Ho; ++i)
        for (int64_t j = 0; j < Wo; ++j, ++oi) {
          bool first = true;
          S best = 0;
          int64_t bi = -1;
          for (int64_t p = 0; p < k; ++p) {
            int64_t y = i * stride + p - pad;
            if (y < 0 || y >= H) continue;
            for (int64_t q = 0; q < k; ++q) {
              int64_t xx = j * stride + q - pad;
              if (xx < 0 || xx >= W) continue;
              S v = xin[y * W + xx];
              if (first || v > best) {
                best = v;
                bi = (b * C + c) * H * W + y * W + xx;
                first = false;
              }
            }
          }
          po[oi] = best;
          (*arg)[static_cast<size_t>(oi)] = bi;
        }
    }
  check_finite(out, "maxpool2d");
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, "maxpool2d", [xn, on, arg]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* go = on->g.data();
      for (size_t i = 0; i < arg->size(); ++i) gx.add((*arg)[i], go[i]);
    });
  }
  return out;
}

// Bilinear resize with half-pixel centers and edge clamping.
template <class S>
Tensor<S> bilinear_resize(const Tensor<S>& x, int64_t Ho, int64_t Wo) {
  if (x.rank() != 4) fail_shape("bilinear_resize expects [B,C,H,W]");
  if (Ho < 1 || Wo < 1) fail_shape("bilinear_resize target must be positive");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  struct Tap {
    int64_t a, b;
    double f;
  };
  auto make_taps = [](int64_t in, int64_t out) {
    std::vector<Tap> taps(static_cast<size_t>(out));
    double scale = static_cast<double>(in) / out;
    for (int64_t i = 0; i < out; ++i) {
      double s = (i + 0.5) * scale - 0.5;
      s = std::max(0.0, std::min(s, static_cast<double>(in - 1)));
      int64_t a = static_cast<int64_t>(std::floor(s));
      taps[static_cast<size_t>(i)] = {a, std::min(a + 1, in - 1), s - a};
    }
    return taps;
  };
  auto ty = std::make_shared<std::vector<Tap>>(make_taps(H, Ho));
  auto tx = std::make_shared<std::vector<Tap>>(make_taps(W, Wo));
  Tensor<S> out(Shape{B, C, Ho, Wo});
  const S* px = x.data();
  S* po = out.data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const S* xin = px + bc * H * W;
    S* yout = po + bc * Ho * Wo;
    for (int64_t i = 0; i < Ho; ++i) {
      const Tap& r = (*ty)[static_cast<size_t>(i)];
      for (int64_t j = 0; j < Wo; ++j) {
        const Tap& c = (*tx)[static_cast<size_t>(j)];
        double top = (1 - c.f) * xin[r.a * W + c.a] + c.f * xin[r.a * W + c.b];
        double bot = (1 - c.f) * xin[r.b * W + c.a] + c.f * xin[r.b * W + c.b];
        yout[i * Wo + j] = static_cast<S>((1 - r.f) * top + r.f * bot);
      }
    }
  }
  check_finite(out, "bilinear_resize");
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, "bilinear_resize", [xn, on, ty, tx, B, C, H, W, Ho, Wo]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* go = on->g.data();
      for (int64_t bc = 0; bc < B * C; ++bc) {
        int64_t xoff = bc * H * W;
        const S* g = go + bc * Ho * Wo;
        for (int64_t i = 0; i < Ho; ++i) {
          const Tap& r = (*ty)[static_cast<size_t>(i)];
          for (int64_t j = 0; j < Wo; ++j) {
            const Tap& c = (*tx)[static_cast<size_t>(j)];
            double gv = static_cast<double>(g[i * Wo + j]);
            gx.add(xoff + r.a * W + c.a, static_cast<S>((1 - r.f) * (1 - c.f) * gv));
            gx.add(xoff + r.a * W + c.b, static_cast<S>((1 - r.f) * c.f * gv));
            gx.add(xoff + r.b * W + c.a, static_cast<S>(r.f * (1 - c.f) * gv));
            gx.add(xoff + r.b * W + c.b, static_cast<S>(r.f * c.f * gv));
          }
        }
      }
    });
  }
  return out;
}

}  // namespace gcunet
