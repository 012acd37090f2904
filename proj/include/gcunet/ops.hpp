#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "gcunet/mask.hpp"
#include "gcunet/tape.hpp"
#include "gcunet/tensor.hpp"

namespace gcunet {

// ---------------------------------------------------------------------------
// gradient sink: every backward closure adds through one of these so the
// corruption hook (tape.hpp) sees all paths, and accumulation order stays the
// op's own deterministic loop order.
template <class S>
struct GradSink {
  TensorData<S>* d;
  S scale;
  explicit GradSink(const std::shared_ptr<TensorData<S>>& n) : d(n.get()) {
    d->ensure_grad();
    scale = GradCorruption::active_for(GradTape<S>::current_op())
                ? static_cast<S>(GradCorruption::scale())
                : S(1);
  }
  void add(int64_t i, S amount) { d->g[static_cast<size_t>(i)] += scale * amount; }
};

// Multiply-accumulate counter for the complexity profiler. GEMM-backed ops
// (matmul, linear, conv) report their MAC count here during forward.
struct MacCounter {
  static int64_t*& active() {
    thread_local int64_t* p = nullptr;
    return p;
  }
};

inline void count_macs(int64_t n) {
  if (int64_t* p = MacCounter::active()) *p += n;
}

class MacScope {
 public:
  MacScope() {
    prev_ = MacCounter::active();
    MacCounter::active() = &macs_;
  }
  ~MacScope() { MacCounter::active() = prev_; }
  int64_t macs() const { return macs_; }

 private:
  int64_t macs_ = 0;
  int64_t* prev_;
};

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

// ---------------------------------------------------------------------------
// broadcasting (trailing-aligned; extent 1 stretches)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      fail_shape("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// strides of `in` aligned to the broadcast output rank, 0 on stretched dims
inline std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  auto st = strides_of(in);
  std::vector<int64_t> r(out.size(), 0);
  size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i) r[off + i] = in[i] == 1 ? 0 : st[i];
  return r;
}

// Walks every flat index of `out`, keeping two source indices in sync via an
// odometer. fn(i_out, i_a, i_b).
template <class Fn>
inline void for_each_bcast(const Shape& out, const std::vector<int64_t>& sa,
                           const std::vector<int64_t>& sb, Fn fn) {
  int64_t n = numel_of(out);
  int r = static_cast<int>(out.size());
  std::vector<int64_t> coord(static_cast<size_t>(r), 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++coord[static_cast<size_t>(d)];
      ia += sa[static_cast<size_t>(d)];
      ib += sb[static_cast<size_t>(d)];
      if (coord[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
      ia -= sa[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
      ib -= sb[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
      coord[static_cast<size_t>(d)] = 0;
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise

// F: S(x,y) value; DA/DB: S(x,y,o) partials wrt x and y.
template <class S, class F, class DA, class DB>
Tensor<S> binary_elementwise(const Tensor<S>& a, const Tensor<S>& b, const char* name, F f, DA da,
                             DB db) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor<S> out(os);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  if (a.shape() == b.shape()) {
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  } else {
    auto sa = bcast_strides(a.shape(), os);
    auto sb = bcast_strides(b.shape(), os);
    for_each_bcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = f(pa[ia], pb[ib]); });
  }
  check_finite(out, name);
  if (needs_tape<S>({&a, &b})) {
    bool na = a.requires_grad(), nb = b.requires_grad();
    auto an = a.node(), bn = b.node(), on = out.node();
    Shape osc = os;
    record_node(out, name, [an, bn, on, osc, na, nb, da, db]() {
      if (on->g.empty()) return;
      const S* x = an->v.data();
      const S* y = bn->v.data();
      const S* o = on->v.data();
      const S* go = on->g.data();
      auto sa = bcast_strides(an->shape, osc);
      auto sb = bcast_strides(bn->shape, osc);
      if (na && nb) {
        GradSink<S> ga(an), gb(bn);
        for_each_bcast(osc, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
          ga.add(ia, go[i] * da(x[ia], y[ib], o[i]));
          gb.add(ib, go[i] * db(x[ia], y[ib], o[i]));
        });
      } else if (na) {
        GradSink<S> ga(an);
        for_each_bcast(osc, sa, sb,
                       [&](int64_t i, int64_t ia, int64_t ib) { ga.add(ia, go[i] * da(x[ia], y[ib], o[i])); });
      } else if (nb) {
        GradSink<S> gb(bn);
        for_each_bcast(osc, sa, sb,
                       [&](int64_t i, int64_t ia, int64_t ib) { gb.add(ib, go[i] * db(x[ia], y[ib], o[i])); });
      }
    });
  }
  return out;
}

template <class S, class F, class DF>
Tensor<S> unary_elementwise(const Tensor<S>& x, const char* name, F f, DF df) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
  check_finite(out, name);
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, name, [xn, on, df]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* x = xn->v.data();
      const S* o = on->v.data();
      const S* go = on->g.data();
      int64_t n = static_cast<int64_t>(on->v.size());
      for (int64_t i = 0; i < n; ++i) gx.add(i, go[i] * df(x[i], o[i]));
    });
  }
  return out;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_elementwise(
      a, b, "add", [](S x, S y) { return x + y; }, [](S, S, S) { return S(1); },
      [](S, S, S) { return S(1); });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_elementwise(
      a, b, "sub", [](S x, S y) { return x - y; }, [](S, S, S) { return S(1); },
      [](S, S, S) { return S(-1); });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_elementwise(
      a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y, S) { return y; },
      [](S x, S, S) { return x; });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_elementwise(
      a, b, "div", [](S x, S y) { return x / y; }, [](S, S y, S) { return S(1) / y; },
      [](S, S y, S o) { return -o / y; });
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }

template <class S>
Tensor<S> scalar_mul(const Tensor<S>& x, double c) {
  S k = static_cast<S>(c);
  return unary_elementwise(
      x, "scalar_mul", [k](S v) { return v * k; }, [k](S, S) { return k; });
}

template <class S>
Tensor<S> scalar_add(const Tensor<S>& x, double c) {
  S k = static_cast<S>(c);
  return unary_elementwise(
      x, "scalar_add", [k](S v) { return v + k; }, [](S, S) { return S(1); });
}

// c - x
template <class S>
Tensor<S> scalar_sub(double c, const Tensor<S>& x) {
  S k = static_cast<S>(c);
  return unary_elementwise(
      x, "scalar_sub", [k](S v) { return k - v; }, [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> operator*(const Tensor<S>& x, double c) { return scalar_mul(x, c); }
template <class S>
Tensor<S> operator*(double c, const Tensor<S>& x) { return scalar_mul(x, c); }
template <class S>
Tensor<S> operator+(const Tensor<S>& x, double c) { return scalar_add(x, c); }
template <class S>
Tensor<S> operator+(double c, const Tensor<S>& x) { return scalar_add(x, c); }
template <class S>
Tensor<S> operator-(const Tensor<S>& x, double c) { return scalar_add(x, -c); }
template <class S>
Tensor<S> operator-(double c, const Tensor<S>& x) { return scalar_sub(c, x); }
template <class S>
Tensor<S> operator-(const Tensor<S>& x) { return scalar_mul(x, -1.0); }
template <class S>
Tensor<S> operator/(const Tensor<S>& x, double c) { return scalar_mul(x, 1.0 / c); }

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary_elementwise(
      x, "relu", [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

// exact gelu: 0.5 x (1 + erf(x / sqrt(2)))
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  return unary_elementwise(
      x, "gelu",
      [](S v) {
        double z = static_cast<double>(v);
        return static_cast<S>(0.5 * z * (1.0 + std::erf(z * 0.7071067811865475244)));
      },
      [](S v, S) {
        double z = static_cast<double>(v);
        double cdf = 0.5 * (1.0 + std::erf(z * 0.7071067811865475244));
        double pdf = 0.3989422804014326779 * std::exp(-0.5 * z * z);
        return static_cast<S>(cdf + z * pdf);
      });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary_elementwise(
      x, "sigmoid",
      [](S v) {
        double z = static_cast<double>(v);
        return static_cast<S>(z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                     : std::exp(z) / (1.0 + std::exp(z)));
      },
      [](S, S o) { return o * (S(1) - o); });
}

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary_elementwise(
      x, "exp", [](S v) { return static_cast<S>(std::exp(static_cast<double>(v))); },
      [](S, S o) { return o; });
}

template <class S>
Tensor<S> log(const Tensor<S>& x) {
  return unary_elementwise(
      x, "log", [](S v) { return static_cast<S>(std::log(static_cast<double>(v))); },
      [](S v, S) { return S(1) / v; });
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& x) {
  return unary_elementwise(
      x, "sqrt", [](S v) { return static_cast<S>(std::sqrt(static_cast<double>(v))); },
      [](S, S o) { return S(1) / (S(2) * o); });
}

// ---------------------------------------------------------------------------
// reductions

inline std::vector<int64_t> normalize_axes(std::vector<int64_t> axes, int64_t rank) {
  for (auto& a : axes) {
    if (a < 0) a += rank;
    if (a < 0 || a >= rank) fail_shape("reduction axis " + std::to_string(a) + " out of range");
  }
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end())
    fail_shape("duplicate reduction axis");
  return axes;
}

// Shared machinery: out index for each input index (stride 0 on reduced dims).
template <class S>
Tensor<S> reduce_sum_impl(const Tensor<S>& x, std::vector<int64_t> axes, bool keepdim,
                          bool mean, const char* name) {
  axes = normalize_axes(std::move(axes), x.rank());
  Shape os;
  std::vector<bool> reduced(static_cast<size_t>(x.rank()), false);
  for (int64_t a : axes) reduced[static_cast<size_t>(a)] = true;
  int64_t count = 1;
  for (int64_t d = 0; d < x.rank(); ++d) {
    if (reduced[static_cast<size_t>(d)]) {
      count *= x.dim(d);
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(x.dim(d));
    }
  }
  Tensor<S> out(os);
  // out strides aligned to input rank, 0 where reduced
  std::vector<int64_t> omap(static_cast<size_t>(x.rank()), 0);
  {
    auto ost = strides_of(os);
    size_t k = 0;
    for (int64_t d = 0; d < x.rank(); ++d) {
      if (reduced[static_cast<size_t>(d)]) {
        if (keepdim) ++k;
        continue;
      }
      omap[static_cast<size_t>(d)] = ost[k++];
    }
  }
  auto zeros = std::vector<int64_t>(static_cast<size_t>(x.rank()), 0);
  const S* px = x.data();
  S* po = out.data();
  for_each_bcast(x.shape(), omap, zeros, [&](int64_t i, int64_t oi, int64_t) { po[oi] += px[i]; });
  S inv = mean ? S(1) / static_cast<S>(count) : S(1);
  if (mean)
    for (auto& v : out.values()) v *= inv;
  check_finite(out, name);
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, name, [xn, on, omap, inv]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* go = on->g.data();
      auto zeros = std::vector<int64_t>(xn->shape.size(), 0);
      for_each_bcast(xn->shape, omap, zeros,
                     [&](int64_t i, int64_t oi, int64_t) { gx.add(i, go[oi] * inv); });
    });
  }
  return out;
}

template <class S>
Tensor<S> reduce_sum(const Tensor<S>& x, std::vector<int64_t> axes, bool keepdim = false) {
  return reduce_sum_impl(x, std::move(axes), keepdim, false, "reduce_sum");
}

template <class S>
Tensor<S> reduce_mean(const Tensor<S>& x, std::vector<int64_t> axes, bool keepdim = false) {
  return reduce_sum_impl(x, std::move(axes), keepdim, true, "reduce_mean");
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  std::vector<int64_t> axes(static_cast<size_t>(x.rank()));
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int64_t>(i);
  return reduce_sum(x, axes, false);
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  std::vector<int64_t> axes(static_cast<size_t>(x.rank()));
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int64_t>(i);
  return reduce_mean(x, axes, false);
}

// max over one axis; ties route gradient to the first maximum.
template <class S>
Tensor<S> reduce_max(const Tensor<S>& x, int64_t axis, bool keepdim = false) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) fail_shape("reduce_max axis out of range");
  int64_t outer = 1, inner = 1, len = x.dim(axis);
  for (int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int64_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Shape os;
  for (int64_t d = 0; d < x.rank(); ++d) {
    if (d == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(x.dim(d));
    }
  }
  Tensor<S> out(os);
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(outer * inner));
  const S* px = x.data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < inner; ++j) {
      int64_t base = o * len * inner + j;
      S best = px[base];
      int64_t bk = 0;
      for (int64_t k = 1; k < len; ++k) {
        S v = px[base + k * inner];
        if (v > best) {
          best = v;
          bk = k;
        }
      }
      po[o * inner + j] = best;
      (*arg)[static_cast<size_t>(o * inner + j)] = base + bk * inner;
    }
  check_finite(out, "reduce_max");
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, "reduce_max", [xn, on, arg]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* go = on->g.data();
      for (size_t i = 0; i < arg->size(); ++i) gx.add((*arg)[i], go[i]);
    });
  }
  return out;
}

// [B,C,H,W] -> [B,C]
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) fail_shape("global_avg_pool expects [B,C,H,W], got " + shape_str(x.shape()));
  return reduce_mean(x, {2, 3}, false);
}

// ---------------------------------------------------------------------------
// softmax family (numerically shifted by the row max)

template <class S>
Tensor<S> softmax(const Tensor<S>& x, int64_t axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) fail_shape("softmax axis out of range");
  int64_t outer = 1, inner = 1, len = x.dim(axis);
  for (int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int64_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < inner; ++j) {
      int64_t base = o * len * inner + j;
      S m = px[base];
      for (int64_t k = 1; k < len; ++k) m = std::max(m, px[base + k * inner]);
      double z = 0;
      for (int64_t k = 0; k < len; ++k) {
        double e = std::exp(static_cast<double>(px[base + k * inner] - m));
        po[base + k * inner] = static_cast<S>(e);
        z += e;
      }
      S inv = static_cast<S>(1.0 / z);
      for (int64_t k = 0; k < len; ++k) po[base + k * inner] *= inv;
    }
  check_finite(out, "softmax");
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, "softmax", [xn, on, outer, inner, len]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* y = on->v.data();
      const S* go = on->g.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < inner; ++j) {
          int64_t base = o * len * inner + j;
          double dot = 0;
          for (int64_t k = 0; k < len; ++k)
            dot += static_cast<double>(go[base + k * inner]) * y[base + k * inner];
          for (int64_t k = 0; k < len; ++k) {
            int64_t i = base + k * inner;
            gx.add(i, static_cast<S>(y[i] * (static_cast<double>(go[i]) - dot)));
          }
        }
    });
  }
  return out;
}

template <class S>
Tensor<S> log_softmax(const Tensor<S>& x, int64_t axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) fail_shape("log_softmax axis out of range");
  int64_t outer = 1, inner = 1, len = x.dim(axis);
  for (int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int64_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < inner; ++j) {
      int64_t base = o * len * inner + j;
      S m = px[base];
      for (int64_t k = 1; k < len; ++k) m = std::max(m, px[base + k * inner]);
      double z = 0;
      for (int64_t k = 0; k < len; ++k) z += std::exp(static_cast<double>(px[base + k * inner] - m));
      S lz = static_cast<S>(std::log(z)) + m;
      for (int64_t k = 0; k < len; ++k) po[base + k * inner] = px[base + k * inner] - lz;
    }
  check_finite(out, "log_softmax");
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, "log_softmax", [xn, on, outer, inner, len]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* y = on->v.data();
      const S* go = on->g.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < inner; ++j) {
          int64_t base = o * len * inner + j;
          double gsum = 0;
          for (int64_t k = 0; k < len; ++k) gsum += static_cast<double>(go[base + k * inner]);
          for (int64_t k = 0; k < len; ++k) {
            int64_t i = base + k * inner;
            gx.add(i, static_cast<S>(go[i] - std::exp(static_cast<double>(y[i])) * gsum));
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer norm over the last dimension

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
  int64_t d = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
    fail_shape("layer_norm affine params must be [" + std::to_string(d) + "]");
  int64_t rows = x.numel() / d;
  Tensor<S> out(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(x.numel()));
  auto rstd = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * d;
    double mean = 0;
    for (int64_t k = 0; k < d; ++k) mean += row[k];
    mean /= d;
    double var = 0;
    for (int64_t k = 0; k < d; ++k) {
      double c = row[k] - mean;
      var += c * c;
    }
    var /= d;
    double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[static_cast<size_t>(r)] = static_cast<S>(rs);
    for (int64_t k = 0; k < d; ++k) {
      S h = static_cast<S>((row[k] - mean) * rs);
      (*xhat)[static_cast<size_t>(r * d + k)] = h;
      po[r * d + k] = h * pg[k] + pb[k];
    }
  }
  check_finite(out, "layer_norm");
  if (needs_tape<S>({&x, &gamma, &beta})) {
    bool nx = x.requires_grad(), ng = gamma.requires_grad(), nb = beta.requires_grad();
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    record_node(out, "layer_norm", [xn, gn, bn, on, xhat, rstd, rows, d, nx, ng, nb]() {
      if (on->g.empty()) return;
      const S* go = on->g.data();
      const S* pg = gn->v.data();
      if (ng) {
        GradSink<S> gsink(gn);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t k = 0; k < d; ++k)
            gsink.add(k, go[r * d + k] * (*xhat)[static_cast<size_t>(r * d + k)]);
      }
      if (nb) {
        GradSink<S> bsink(bn);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t k = 0; k < d; ++k) bsink.add(k, go[r * d + k]);
      }
      if (nx) {
        GradSink<S> xsink(xn);
        for (int64_t r = 0; r < rows; ++r) {
          double gh_mean = 0, ghx_mean = 0;
          for (int64_t k = 0; k < d; ++k) {
            double gh = static_cast<double>(go[r * d + k]) * pg[k];
            gh_mean += gh;
            ghx_mean += gh * (*xhat)[static_cast<size_t>(r * d + k)];
          }
          gh_mean /= d;
          ghx_mean /= d;
          double rs = (*rstd)[static_cast<size_t>(r)];
          for (int64_t k = 0; k < d; ++k) {
            double gh = static_cast<double>(go[r * d + k]) * pg[k];
            double h = (*xhat)[static_cast<size_t>(r * d + k)];
            xsink.add(r * d + k, static_cast<S>(rs * (gh - gh_mean - h * ghx_mean)));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul / linear (Eigen single-threaded GEMM)

// a: [..., M, K], b: [..., K, N] with identical leading dims, or b: [K, N]
// shared across the batch.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2) fail_shape("matmul operands must have rank >= 2");
  int64_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  int64_t Kb = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
  if (K != Kb)
    fail_shape("matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape lead(a.shape().begin(), a.shape().end() - 2);
  bool shared_b = b.rank() == 2;
  if (!shared_b) {
    Shape bl(b.shape().begin(), b.shape().end() - 2);
    if (bl != lead)
      fail_shape("matmul batch dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  int64_t batch = numel_of(lead);
  Shape os = lead;
  os.push_back(M);
  os.push_back(N);
  Tensor<S> out(os);
  count_macs(batch * M * K * N);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t t = 0; t < batch; ++t) {
    ECMap<S> A(pa + t * M * K, M, K);
    ECMap<S> B(pb + (shared_b ? 0 : t * K * N), K, N);
    EMap<S> O(po + t * M * N, M, N);
    O.noalias() = A * B;
  }
  check_finite(out, "matmul");
  if (needs_tape<S>({&a, &b})) {
    bool na = a.requires_grad(), nb = b.requires_grad();
    auto an = a.node(), bn = b.node(), on = out.node();
    record_node(out, "matmul", [an, bn, on, M, K, N, batch, shared_b, na, nb]() {
      if (on->g.empty()) return;
      const S* pa = an->v.data();
      const S* pb = bn->v.data();
      const S* go = on->g.data();
      if (na) {
        GradSink<S> ga(an);
        std::vector<S> tmp(static_cast<size_t>(M * K));
        for (int64_t t = 0; t < batch; ++t) {
          ECMap<S> G(go + t * M * N, M, N);
          ECMap<S> B(pb + (shared_b ? 0 : t * K * N), K, N);
          EMap<S> T(tmp.data(), M, K);
          T.noalias() = G * B.transpose();
          for (int64_t i = 0; i < M * K; ++i) ga.add(t * M * K + i, tmp[static_cast<size_t>(i)]);
        }
      }
      if (nb) {
        GradSink<S> gb(bn);
        std::vector<S> tmp(static_cast<size_t>(K * N));
        for (int64_t t = 0; t < batch; ++t) {
          ECMap<S> A(pa + t * M * K, M, K);
          ECMap<S> G(go + t * M * N, M, N);
          EMap<S> T(tmp.data(), K, N);
          T.noalias() = A.transpose() * G;
          int64_t off = shared_b ? 0 : t * K * N;
          for (int64_t i = 0; i < K * N; ++i) gb.add(off + i, tmp[static_cast<size_t>(i)]);
        }
      }
    });
  }
  return out;
}

// x: [..., in] times w: [out, in] plus b: [out] -> [..., out]
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (w.rank() != 2) fail_shape("linear weight must be [out,in]");
  int64_t in = w.dim(1), outf = w.dim(0);
  if (x.rank() < 1 || x.dim(x.rank() - 1) != in)
    fail_shape("linear expects trailing dim " + std::to_string(in) + ", got " +
               shape_str(x.shape()));
  bool with_bias = b.defined();
  if (with_bias && (b.rank() != 1 || b.dim(0) != outf)) fail_shape("linear bias must be [out]");
  int64_t rows = x.numel() / in;
  Shape os(x.shape().begin(), x.shape().end() - 1);
  os.push_back(outf);
  Tensor<S> out(os);
  count_macs(rows * in * outf);
  ECMap<S> X(x.data(), rows, in);
  ECMap<S> W(w.data(), outf, in);
  EMap<S> O(out.data(), rows, outf);
  O.noalias() = X * W.transpose();
  if (with_bias) {
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t k = 0; k < outf; ++k) po[r * outf + k] += pb[k];
  }
  check_finite(out, "linear");
  Tensor<S> bref = b;
  bool nb = with_bias && b.requires_grad();
  bool any = x.requires_grad() || w.requires_grad() || nb;
  if (tape_active<S>() && any) {
    bool nx = x.requires_grad(), nw = w.requires_grad();
    auto xn = x.node(), wn = w.node(), on = out.node();
    std::shared_ptr<TensorData<S>> bn = with_bias ? b.node() : nullptr;
    record_node(out, "linear", [xn, wn, bn, on, rows, in, outf, nx, nw, nb]() {
      if (on->g.empty()) return;
      ECMap<S> G(on->g.data(), rows, outf);
      if (nx) {
        GradSink<S> gx(xn);
        std::vector<S> tmp(static_cast<size_t>(rows * in));
        ECMap<S> W(wn->v.data(), outf, in);
        EMap<S> T(tmp.data(), rows, in);
        T.noalias() = G * W;
        for (int64_t i = 0; i < rows * in; ++i) gx.add(i, tmp[static_cast<size_t>(i)]);
      }
      if (nw) {
        GradSink<S> gw(wn);
        std::vector<S> tmp(static_cast<size_t>(outf * in));
        ECMap<S> X(xn->v.data(), rows, in);
        EMap<S> T(tmp.data(), outf, in);
        T.noalias() = G.transpose() * X;
        for (int64_t i = 0; i < outf * in; ++i) gw.add(i, tmp[static_cast<size_t>(i)]);
      }
      if (nb) {
        GradSink<S> gb(bn);
        const S* go = on->g.data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t k = 0; k < outf; ++k) gb.add(k, go[r * outf + k]);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
  return linear(x, w, Tensor<S>());
}

// ---------------------------------------------------------------------------
// shape ops

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape ns) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < ns.size(); ++i) {
    if (ns[i] == -1) {
      if (infer >= 0) fail_shape("reshape: more than one -1");
      infer = static_cast<int>(i);
    } else {
      known *= ns[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0)
      fail_shape("reshape: cannot infer dim for " + shape_str(x.shape()));
    ns[static_cast<size_t>(infer)] = x.numel() / known;
  }
  if (numel_of(ns) != x.numel())
    fail_shape("reshape " + shape_str(x.shape()) + " -> " + shape_str(ns) + " changes element count");
  Tensor<S> out(ns);
  out.values() = x.values();
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, "reshape", [xn, on]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      for (size_t i = 0; i < on->g.size(); ++i) gx.add(static_cast<int64_t>(i), on->g[i]);
    });
  }
  return out;
}

template <class S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int64_t> perm) {
  int64_t r = x.rank();
  if (static_cast<int64_t>(perm.size()) != r) fail_shape("permute rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape os(static_cast<size_t>(r));
  for (int64_t d = 0; d < r; ++d) {
    int64_t p = perm[static_cast<size_t>(d)];
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)]) fail_shape("permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
    os[static_cast<size_t>(d)] = x.dim(p);
  }
  auto xst = strides_of(x.shape());
  std::vector<int64_t> gst(static_cast<size_t>(r));
  for (int64_t d = 0; d < r; ++d) gst[static_cast<size_t>(d)] = xst[static_cast<size_t>(perm[static_cast<size_t>(d)])];
  Tensor<S> out(os);
  const S* px = x.data();
  S* po = out.data();
  auto zeros = std::vector<int64_t>(static_cast<size_t>(r), 0);
  for_each_bcast(os, gst, zeros, [&](int64_t i, int64_t ix, int64_t) { po[i] = px[ix]; });
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    record_node(out, "permute", [xn, on, os, gst]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* go = on->g.data();
      auto zeros = std::vector<int64_t>(os.size(), 0);
      for_each_bcast(os, gst, zeros, [&](int64_t i, int64_t ix, int64_t) { gx.add(ix, go[i]); });
    });
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int64_t axis) {
  if (xs.empty()) fail_shape("concat of zero tensors");
  int64_t r = xs[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) fail_shape("concat axis out of range");
  Shape os = xs[0].shape();
  int64_t total = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) fail_shape("concat rank mismatch");
    for (int64_t d = 0; d < r; ++d)
      if (d != axis && t.dim(d) != os[static_cast<size_t>(d)])
        fail_shape("concat shape mismatch: " + shape_str(t.shape()) + " vs " + shape_str(os));
    total += t.dim(axis);
  }
  os[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
  for (int64_t d = axis + 1; d < r; ++d) inner *= os[static_cast<size_t>(d)];
  Tensor<S> out(os);
  S* po = out.data();
  int64_t out_row = total * inner;
  int64_t off = 0;
  std::vector<int64_t> chunks;
  for (const auto& t : xs) {
    int64_t chunk = t.dim(axis) * inner;
    chunks.push_back(chunk);
    const S* pt = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pt + o * chunk, pt + (o + 1) * chunk, po + o * out_row + off);
    off += chunk;
  }
  bool need = false;
  if (tape_active<S>())
    for (const auto& t : xs)
      if (t.requires_grad()) need = true;
  if (need) {
    std::vector<std::shared_ptr<TensorData<S>>> nodes;
    std::vector<bool> wants;
    for (const auto& t : xs) {
      nodes.push_back(t.node());
      wants.push_back(t.requires_grad());
    }
    auto on = out.node();
    record_node(out, "concat", [nodes, wants, on, outer, inner, out_row, chunks]() {
      if (on->g.empty()) return;
      const S* go = on->g.data();
      int64_t off = 0;
      for (size_t p = 0; p < nodes.size(); ++p) {
        int64_t chunk = chunks[p];
        if (wants[p]) {
          GradSink<S> gx(nodes[p]);
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < chunk; ++i) gx.add(o * chunk + i, go[o * out_row + off + i]);
        }
        off += chunk;
      }
    });
  }
  (void)inner;
  return out;
}

template <class S>
std::vector<Tensor<S>> split(const Tensor<S>& x, const std::vector<int64_t>& sizes, int64_t axis) {
  int64_t r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) fail_shape("split axis out of range");
  int64_t total = 0;
  for (int64_t s : sizes) {
    if (s <= 0) fail_shape("split sizes must be positive");
    total += s;
  }
  if (total != x.dim(axis))
    fail_shape("split sizes sum to " + std::to_string(total) + ", axis has " +
               std::to_string(x.dim(axis)));
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int64_t d = axis + 1; d < r; ++d) inner *= x.dim(d);
  int64_t in_row = x.dim(axis) * inner;
  std::vector<Tensor<S>> outs;
  const S* px = x.data();
  int64_t off = 0;
  for (int64_t s : sizes) {
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = s;
    Tensor<S> t(os);
    S* pt = t.data();
    int64_t chunk = s * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy(px + o * in_row + off, px + o * in_row + off + chunk, pt + o * chunk);
    off += chunk;
    outs.push_back(std::move(t));
  }
  if (needs_tape<S>({&x})) {
    auto xn = x.node();
    std::vector<std::shared_ptr<TensorData<S>>> onodes;
    std::vector<int64_t> chunks;
    for (size_t p = 0; p < outs.size(); ++p) {
      onodes.push_back(outs[p].node());
      chunks.push_back(sizes[p] * inner);
      outs[p].set_requires_grad(true);
    }
    GradTape<S>::active()->record("split", [xn, onodes, chunks, outer, in_row]() {
      GradSink<S> gx(xn);
      int64_t off = 0;
      for (size_t p = 0; p < onodes.size(); ++p) {
        int64_t chunk = chunks[p];
        if (!onodes[p]->g.empty()) {
          const S* go = onodes[p]->g.data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < chunk; ++i) gx.add(o * in_row + off + i, go[o * chunk + i]);
        }
        off += chunk;
      }
    });
  }
  return outs;
}

// rows of x repeated `times` each along axis 0: [B, ...] -> [B*times, ...]
template <class S>
Tensor<S> repeat_interleave0(const Tensor<S>& x, int64_t times) {
  if (x.rank() < 1 || times <= 0) fail_shape("repeat_interleave0: bad arguments");
  Shape os = x.shape();
  os[0] *= times;
  int64_t chunk = x.numel() / x.dim(0);
  Tensor<S> out(os);
  const S* px = x.data();
  S* po = out.data();
  for (int64_t b = 0; b < x.dim(0); ++b)
    for (int64_t t = 0; t < times; ++t)
      std::copy(px + b * chunk, px + (b + 1) * chunk, po + (b * times + t) * chunk);
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    int64_t b0 = x.dim(0);
    record_node(out, "repeat_interleave0", [xn, on, b0, times, chunk]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* go = on->g.data();
      for (int64_t b = 0; b < b0; ++b)
        for (int64_t t = 0; t < times; ++t)
          for (int64_t i = 0; i < chunk; ++i) gx.add(b * chunk + i, go[(b * times + t) * chunk + i]);
    });
  }
  return out;
}

// gathers rows of a [T, D] table; backward scatter-adds into the table.
template <class S>
Tensor<S> index_rows(const Tensor<S>& table, const std::vector<int64_t>& idx) {
  if (table.rank() != 2) fail_shape("index_rows expects a [T,D] table");
  int64_t T = table.dim(0), D = table.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= T) fail_shape("index_rows: index " + std::to_string(i) + " out of range");
  Tensor<S> out(Shape{static_cast<int64_t>(idx.size()), D});
  const S* pt = table.data();
  S* po = out.data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(pt + idx[r] * D, pt + (idx[r] + 1) * D, po + static_cast<int64_t>(r) * D);
  if (needs_tape<S>({&table})) {
    auto tn = table.node(), on = out.node();
    auto ix = std::make_shared<std::vector<int64_t>>(idx);
    record_node(out, "index_rows", [tn, on, ix, D]() {
      if (on->g.empty()) return;
      GradSink<S> gt(tn);
      const S* go = on->g.data();
      for (size_t r = 0; r < ix->size(); ++r)
        for (int64_t k = 0; k < D; ++k)
          gt.add((*ix)[r] * D + k, go[static_cast<int64_t>(r) * D + k]);
    });
  }
  return out;
}

// out[b,h,w] = x[b, labels[b,h,w], h, w]
template <class S>
Tensor<S> select_class(const Tensor<S>& x, const LabelMask& m) {
  if (x.rank() != 4) fail_shape("select_class expects [B,K,H,W], got " + shape_str(x.shape()));
  int64_t B = x.dim(0), K = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (m.shape != Shape{B, H, W})
    fail_shape("select_class mask shape " + shape_str(m.shape) + " does not match logits " +
               shape_str(x.shape()));
  m.check_range(K, "select_class");
  Tensor<S> out(Shape{B, H, W});
  const S* px = x.data();
  S* po = out.data();
  int64_t hw = H * W;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < hw; ++p)
      po[b * hw + p] = px[(b * K + m.v[static_cast<size_t>(b * hw + p)]) * hw + p];
  if (needs_tape<S>({&x})) {
    auto xn = x.node(), on = out.node();
    auto labels = std::make_shared<std::vector<int32_t>>(m.v);
    record_node(out, "select_class", [xn, on, labels, B, K, hw]() {
      if (on->g.empty()) return;
      GradSink<S> gx(xn);
      const S* go = on->g.data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < hw; ++p)
          gx.add((b * K + (*labels)[static_cast<size_t>(b * hw + p)]) * hw + p, go[b * hw + p]);
    });
  }
  return out;
}

// constant (no-grad) one-hot encoding: [B,H,W] labels -> [B,K,H,W]
template <class S>
Tensor<S> one_hot(const LabelMask& m, int64_t num_classes) {
  if (m.shape.size() != 3) fail_shape("one_hot expects a [B,H,W] mask");
  m.check_range(num_classes, "one_hot");
  int64_t B = m.shape[0], H = m.shape[1], W = m.shape[2], hw = H * W;
  Tensor<S> out(Shape{B, num_classes, H, W});
  S* po = out.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < hw; ++p)
      po[(b * num_classes + m.v[static_cast<size_t>(b * hw + p)]) * hw + p] = S(1);
  return out;
}

// argmax over the class axis; ties pick the lowest class index.
template <class S>
LabelMask argmax_channel(const Tensor<S>& logits) {
  if (logits.rank() != 4) fail_shape("argmax_channel expects [B,K,H,W]");
  int64_t B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  LabelMask m(Shape{B, H, W});
  const S* p = logits.data();
  int64_t hw = H * W;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < hw; ++i) {
      S best = p[(b * K) * hw + i];
      int32_t bk = 0;
      for (int64_t k = 1; k < K; ++k) {
        S v = p[(b * K + k) * hw + i];
        if (v > best) {
          best = v;
          bk = static_cast<int32_t>(k);
        }
      }
      m.v[static_cast<size_t>(b * hw + i)] = bk;
    }
  return m;
}

}  // namespace gcunet
