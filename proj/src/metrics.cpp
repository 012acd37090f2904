#include "gcunet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "gcunet/common.hpp"

namespace gcunet {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Slice {
  const int32_t* p;
  int64_t H, W;
  bool in(int64_t y, int64_t x, int32_t k) const {
    return y >= 0 && y < H && x >= 0 && x < W && p[y * W + x] == k;
  }
};

Slice as_slice(const LabelMask& m, const char* op) {
  if (m.shape.size() == 2) return {m.v.data(), m.shape[0], m.shape[1]};
  if (m.shape.size() == 3 && m.shape[0] == 1) return {m.v.data(), m.shape[1], m.shape[2]};
  fail_shape(std::string(op) + " expects one 2-D slice, got " + shape_str(m.shape));
}

// member pixels with any 4-neighbour outside the set; the border counts as outside
std::vector<char> surface_of(const Slice& s, int32_t k, bool& any) {
  std::vector<char> m(static_cast<size_t>(s.H * s.W), 0);
  any = false;
  for (int64_t y = 0; y < s.H; ++y)
    for (int64_t x = 0; x < s.W; ++x) {
      if (!s.in(y, x, k)) continue;
      if (!s.in(y - 1, x, k) || !s.in(y + 1, x, k) || !s.in(y, x - 1, k) || !s.in(y, x + 1, k)) {
        m[static_cast<size_t>(y * s.W + x)] = 1;
        any = true;
      }
    }
  return m;
}

// exact squared distance transform to the marked pixels. Row pass finds the
// nearest marked column by integer comparison; column pass takes the lower
// envelope of parabolas f[v] + ((y-v)*sy)^2. Every output is formed as
// (dx*sx)^2 + (dy*sy)^2 for some marked pixel, the same arithmetic an
// all-pairs scan performs, so minima agree bitwise.
std::vector<double> edt_sq(const std::vector<char>& mark, int64_t H, int64_t W, double sy,
                           double sx) {
  std::vector<double> d(mark.size(), kInf);
  std::vector<int64_t> cols;
  for (int64_t y = 0; y < H; ++y) {
    cols.clear();
    for (int64_t x = 0; x < W; ++x)
      if (mark[static_cast<size_t>(y * W + x)]) cols.push_back(x);
    if (cols.empty()) continue;
    size_t ptr = 0;
    for (int64_t x = 0; x < W; ++x) {
      while (ptr + 1 < cols.size() && std::llabs(cols[ptr + 1] - x) <= std::llabs(cols[ptr] - x))
        ++ptr;
      double t = static_cast<double>(x - cols[ptr]) * sx;
      d[static_cast<size_t>(y * W + x)] = t * t;
    }
  }
  const double cc = sy * sy;
  std::vector<int64_t> pos(static_cast<size_t>(H)), vtx(static_cast<size_t>(H));
  std::vector<double> fv(static_cast<size_t>(H)), z(static_cast<size_t>(H) + 1);
  for (int64_t x = 0; x < W; ++x) {
    int64_t m = 0;
    for (int64_t y = 0; y < H; ++y) {
      double v = d[static_cast<size_t>(y * W + x)];
      if (v < kInf) {
        pos[static_cast<size_t>(m)] = y;
        fv[static_cast<size_t>(m)] = v;
        ++m;
      }
    }
    if (m == 0) continue;
    auto isect = [&](int64_t q, int64_t v) {
      double pq = static_cast<double>(pos[static_cast<size_t>(q)]);
      double pv = static_cast<double>(pos[static_cast<size_t>(v)]);
      return (fv[static_cast<size_t>(q)] - fv[static_cast<size_t>(v)] + cc * (pq * pq - pv * pv)) /
             (2.0 * cc * (pq - pv));
    };
    int64_t k = 0;
    vtx[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int64_t q = 1; q < m; ++q) {
      double s = isect(q, vtx[static_cast<size_t>(k)]);
      while (s <= z[static_cast<size_t>(k)]) {
        --k;
        s = isect(q, vtx[static_cast<size_t>(k)]);
      }
      ++k;
      vtx[static_cast<size_t>(k)] = q;
      z[static_cast<size_t>(k)] = s;
      z[static_cast<size_t>(k) + 1] = kInf;
    }
    k = 0;
    for (int64_t y = 0; y < H; ++y) {
      while (z[static_cast<size_t>(k) + 1] < static_cast<double>(y)) ++k;
      int64_t v = vtx[static_cast<size_t>(k)];
      double t = static_cast<double>(y - pos[static_cast<size_t>(v)]) * sy;
      d[static_cast<size_t>(y * W + x)] = fv[static_cast<size_t>(v)] + t * t;
    }
  }
  return d;
}

double percentile95(std::vector<double>& pool) {
  std::sort(pool.begin(), pool.end());
  double rank = 0.95 * static_cast<double>(pool.size() - 1);
  size_t lo = static_cast<size_t>(rank);
  double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= pool.size()) return pool.back();
  return pool[lo] * (1 - frac) + pool[lo + 1] * frac;
}

double hd95_slice(const Slice& a, const Slice& b, int32_t cls, double sy, double sx) {
  bool any_a = false, any_b = false;
  auto sa = surface_of(a, cls, any_a);
  auto sb = surface_of(b, cls, any_b);
  if (!any_a || !any_b) return kHdUndefined;
  auto da = edt_sq(sa, a.H, a.W, sy, sx);
  auto db = edt_sq(sb, a.H, a.W, sy, sx);
  std::vector<double> pool;
  for (size_t i = 0; i < sa.size(); ++i)
    if (sa[i]) pool.push_back(std::sqrt(db[i]));
  for (size_t i = 0; i < sb.size(); ++i)
    if (sb[i]) pool.push_back(std::sqrt(da[i]));
  return percentile95(pool);
}

}  // namespace

double dsc(const LabelMask& pred, const LabelMask& target, int32_t cls) {
  if (pred.shape != target.shape)
    fail_shape("dsc mask shapes differ: " + shape_str(pred.shape) + " vs " +
               shape_str(target.shape));
  int64_t inter = 0, a = 0, b = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    bool pa = pred.v[i] == cls, pb = target.v[i] == cls;
    inter += pa && pb;
    a += pa;
    b += pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double hd95(const LabelMask& pred, const LabelMask& target, int32_t cls, double sy, double sx) {
  if (pred.shape != target.shape)
    fail_shape("hd95 mask shapes differ: " + shape_str(pred.shape) + " vs " +
               shape_str(target.shape));
  if (sy <= 0.0 || sx <= 0.0) fail_config("hd95 spacing must be positive");
  return hd95_slice(as_slice(pred, "hd95"), as_slice(target, "hd95"), cls, sy, sx);
}

CaseReport evaluate_case(const LabelMask& pred, const LabelMask& target,
                         const std::vector<int32_t>& classes, double sy, double sx) {
  if (pred.shape != target.shape)
    fail_shape("evaluate_case mask shapes differ: " + shape_str(pred.shape) + " vs " +
               shape_str(target.shape));
  if (classes.empty()) fail_config("evaluate_case needs at least one class");
  if (sy <= 0.0 || sx <= 0.0) fail_config("evaluate_case spacing must be positive");
  int64_t B, H, W;
  if (pred.shape.size() == 3) {
    B = pred.shape[0];
    H = pred.shape[1];
    W = pred.shape[2];
  } else if (pred.shape.size() == 2) {
    B = 1;
    H = pred.shape[0];
    W = pred.shape[1];
  } else {
    fail_shape("evaluate_case expects [B,H,W] or [H,W] masks, got " + shape_str(pred.shape));
  }
  CaseReport rep;
  double dsc_sum = 0.0, hd_sum = 0.0;
  for (int32_t cls : classes) {
    ClassMetrics cm;
    cm.cls = cls;
    cm.dsc = dsc(pred, target, cls);
    double s = 0.0;
    int64_t n = 0;
    for (int64_t b = 0; b < B; ++b) {
      Slice ps{pred.v.data() + b * H * W, H, W};
      Slice ts{target.v.data() + b * H * W, H, W};
      double h = hd95_slice(ps, ts, cls, sy, sx);
      if (h >= 0.0) {
        s += h;
        ++n;
      }
    }
    if (n > 0) {
      cm.hd95 = s / static_cast<double>(n);
      cm.hd_defined = true;
      hd_sum += cm.hd95;
      ++rep.hd_defined_classes;
    }
    dsc_sum += cm.dsc;
    rep.per_class.push_back(cm);
  }
  rep.mean_dsc = dsc_sum / static_cast<double>(classes.size());
  if (rep.hd_defined_classes > 0)
    rep.mean_hd95 = hd_sum / static_cast<double>(rep.hd_defined_classes);
  return rep;
}

std::string CaseReport::to_text() const {
  std::string out;
  char line[128];
  for (const auto& cm : per_class) {
    if (cm.hd_defined)
      std::snprintf(line, sizeof(line), "class %d  dsc %.2f%%  hd95 %.4f\n", cm.cls,
                    100.0 * cm.dsc, cm.hd95);
    else
      std::snprintf(line, sizeof(line), "class %d  dsc %.2f%%  hd95 undefined\n", cm.cls,
                    100.0 * cm.dsc);
    out += line;
  }
  if (hd_defined_classes > 0)
    std::snprintf(line, sizeof(line), "mean     dsc %.2f%%  hd95 %.4f\n", 100.0 * mean_dsc,
                  mean_hd95);
  else
    std::snprintf(line, sizeof(line), "mean     dsc %.2f%%  hd95 undefined\n", 100.0 * mean_dsc);
  out += line;
  return out;
}

}  // namespace gcunet
