#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gcunet/gradcheck.hpp"
#include "gcunet/losses.hpp"
#include "gcunet/metrics.hpp"
#include "gcunet/rng.hpp"
#include "oracles.hpp"

using namespace gcunet;
using T = Tensor<double>;

// channel-axis softmax of [B,K,H,W] logits via the per-pixel row oracle
static std::vector<double> oracle_probs(const T& logits) {
  int64_t B = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  std::vector<double> out(logits.values().size());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < HW; ++i) {
      std::vector<double> row(static_cast<size_t>(K));
      for (int64_t k = 0; k < K; ++k)
        row[static_cast<size_t>(k)] = logits.values()[static_cast<size_t>((b * K + k) * HW + i)];
      auto p = oracle::softmax_row(row);
      for (int64_t k = 0; k < K; ++k)
        out[static_cast<size_t>((b * K + k) * HW + i)] = p[static_cast<size_t>(k)];
    }
  return out;
}

static LabelMask random_mask(Shape s, int32_t K, Rng& rng) {
  LabelMask m(std::move(s));
  for (auto& v : m.v) v = static_cast<int32_t>(rng.below(static_cast<uint64_t>(K)));
  return m;
}

TEST_CASE("dice loss on peaked and uniform logits") {
  LabelMask tgt(Shape{1, 4, 4});
  for (int i = 0; i < 16; ++i) tgt.v[static_cast<size_t>(i)] = i % 2;
  T peaked = T::zeros({1, 2, 4, 4});
  for (int64_t i = 0; i < 16; ++i)
    peaked.data()[static_cast<size_t>(tgt.v[static_cast<size_t>(i)]) * 16 + i] = 30.0;
  CHECK(dice_loss(peaked, tgt).item() < 0.01);

  T uniform = T::zeros({1, 2, 4, 4});
  double v = dice_loss(uniform, tgt).item();
  CHECK(v == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("dice loss matches the scalar oracle") {
  Rng rng(29);
  T logits = T::normal({2, 2, 2, 2}, rng, 0.0, 2.0);
  LabelMask tgt = random_mask({2, 2, 2}, 2, rng);
  double got = dice_loss(logits, tgt).item();
  double want = oracle::dice_loss(oracle_probs(logits), tgt.v, 2, 2, 4, 1e-5);
  CHECK(got == doctest::Approx(want).epsilon(1e-6));
  CHECK(got >= 0.0);
  CHECK(got <= 1.0);
}

TEST_CASE("cross-entropy analytic values and oracle") {
  LabelMask tgt(Shape{1, 2, 2});
  tgt.v = {0, 1, 2, 3};
  T uniform = T::zeros({1, 4, 2, 2});
  CHECK(ce_loss(uniform, tgt).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  T margin = T::zeros({1, 4, 2, 2});
  for (int64_t i = 0; i < 4; ++i)
    margin.data()[static_cast<size_t>(tgt.v[static_cast<size_t>(i)]) * 4 + i] = 20.0;
  CHECK(ce_loss(margin, tgt).item() < 1e-6);

  Rng rng(29);
  T logits = T::normal({2, 2, 2, 2}, rng, 0.0, 2.0);
  LabelMask t2 = random_mask({2, 2, 2}, 2, rng);
  double got = ce_loss(logits, t2).item();
  double want = oracle::ce_loss(logits.values(), t2.v, 2, 2, 4);
  CHECK(got == doctest::Approx(want).epsilon(1e-6));
  CHECK(got >= 0.0);
}

TEST_CASE("combined loss is linear in the weights") {
  Rng rng(29);
  T logits = T::normal({2, 3, 4, 4}, rng, 0.0, 1.5);
  LabelMask tgt = random_mask({2, 4, 4}, 3, rng);
  double d = dice_loss(logits, tgt).item();
  double c = ce_loss(logits, tgt).item();
  CHECK(combined_loss(logits, tgt, {1.0, 0.0}).item() == d);
  CHECK(combined_loss(logits, tgt, {0.0, 1.0}).item() == c);
  for (double wd : {0.3, 0.5, 0.7}) {
    double got = combined_loss(logits, tgt, {wd, 1.0 - wd}).item();
    CHECK(got == doctest::Approx(wd * d + (1.0 - wd) * c).epsilon(1e-9));
  }
}

TEST_CASE("loss validation errors") {
  T logits = T::zeros({1, 2, 2, 2});
  LabelMask tgt(Shape{1, 2, 2});
  CHECK_THROWS_AS(combined_loss(logits, tgt, {0.5, 0.6}), Error);
  CHECK_THROWS_AS(combined_loss(logits, tgt, {-0.1, 1.1}), Error);
  LabelMask bad_shape(Shape{1, 2, 3});
  CHECK_THROWS_AS(dice_loss(logits, bad_shape), Error);
  CHECK_THROWS_AS(ce_loss(logits, bad_shape), Error);
  LabelMask bad_label(Shape{1, 2, 2});
  bad_label.v[0] = 2;
  CHECK_THROWS_AS(dice_loss(logits, bad_label), Error);
  CHECK_THROWS_AS(ce_loss(logits, bad_label), Error);
  CHECK_THROWS_AS(dice_loss(logits, tgt, 0.0), Error);
}

TEST_CASE("loss gradients check against finite differences") {
  Rng rng(11);
  T logits = T::normal({1, 3, 4, 4}, rng, 0.0, 1.0);
  logits.set_requires_grad(true);
  LabelMask tgt = random_mask({1, 4, 4}, 3, rng);
  NamedParams ps{{"logits", logits}};
  auto rep_d = fd_check("dice", [&]() { return dice_loss(logits, tgt); }, ps, 1e-4, 24);
  CHECK(rep_d.worst() < 1e-3);
  auto rep_c = fd_check("ce", [&]() { return ce_loss(logits, tgt); }, ps, 1e-4, 24);
  CHECK(rep_c.worst() < 1e-3);
  auto rep_m = fd_check("combined", [&]() { return combined_loss(logits, tgt); }, ps, 1e-4, 24);
  CHECK(rep_m.worst() < 1e-3);
}

TEST_CASE("dsc set conventions") {
  LabelMask a(Shape{4, 4}), b(Shape{4, 4});
  CHECK(dsc(a, b, 1) == 1.0);  // both empty
  a.v[0] = 1;
  CHECK(dsc(a, b, 1) == 0.0);  // one empty
  b.v[0] = 1;
  CHECK(dsc(a, b, 1) == 1.0);

  LabelMask p(Shape{4, 4}), t(Shape{4, 4});
  for (int i = 0; i < 4; ++i) p.v[static_cast<size_t>(i)] = 1;        // |P| = 4
  for (int i = 1; i < 7; ++i) t.v[static_cast<size_t>(i)] = 1;        // |T| = 6, overlap 3
  CHECK(dsc(p, t, 1) == doctest::Approx(0.6));
  CHECK(dsc(t, p, 1) == dsc(p, t, 1));

  LabelMask d1(Shape{2, 2}), d2(Shape{2, 2});
  d1.v = {1, 1, 0, 0};
  d2.v = {0, 0, 1, 1};
  CHECK(dsc(d1, d2, 1) == 0.0);

  LabelMask wrong(Shape{2, 3});
  CHECK_THROWS_AS(dsc(d1, wrong, 1), Error);
}

TEST_CASE("hd95 basic geometry") {
  LabelMask a(Shape{8, 8}), b(Shape{8, 8});
  a.v[0] = 1;            // pixel (0,0)
  b.v[3 * 8 + 4] = 1;    // pixel (3,4)
  CHECK(hd95(a, b, 1) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(hd95(a, b, 1) == hd95(b, a, 1));
  CHECK(hd95(a, a, 1) == 0.0);

  LabelMask empty(Shape{8, 8});
  CHECK(hd95(a, empty, 1) == kHdUndefined);
  CHECK(hd95(empty, a, 1) == kHdUndefined);
  CHECK(hd95(empty, empty, 1) == kHdUndefined);

  CHECK_THROWS_AS(hd95(a, b, 1, 0.0, 1.0), Error);
  CHECK_THROWS_AS(hd95(a, b, 1, 1.0, -2.0), Error);
}

TEST_CASE("hd95 matches the all-pairs oracle exactly") {
  Rng rng(31);
  int checked = 0;
  for (int trial = 0; trial < 24; ++trial) {
    int64_t H = 4 + static_cast<int64_t>(rng.below(29));
    int64_t W = 4 + static_cast<int64_t>(rng.below(29));
    LabelMask a = random_mask({H, W}, 2, rng);
    LabelMask b = random_mask({H, W}, 2, rng);
    for (auto [sy, sx] : std::vector<std::pair<double, double>>{{1, 1}, {2, 1}, {0.5, 2}}) {
      double want = oracle::hd95_bruteforce(a.v, b.v, H, W, 1, sy, sx);
      double got = hd95(a, b, 1, sy, sx);
      if (want < 0) {
        CHECK(got == kHdUndefined);
      } else {
        CHECK(got == want);  // bitwise, not approximate
        ++checked;
      }
    }
  }
  CHECK(checked > 40);
}

TEST_CASE("hd95 scales linearly with isotropic spacing") {
  Rng rng(77);
  LabelMask a = random_mask({16, 16}, 2, rng);
  LabelMask b = random_mask({16, 16}, 2, rng);
  double d1 = hd95(a, b, 1, 1.0, 1.0);
  double d2 = hd95(a, b, 1, 2.0, 2.0);
  REQUIRE(d1 >= 0.0);
  CHECK(d2 == 2.0 * d1);
}

TEST_CASE("evaluate_case aggregates per-class and per-slice metrics") {
  Rng rng(37);
  LabelMask pred = random_mask({3, 12, 12}, 3, rng);
  LabelMask tgt = random_mask({3, 12, 12}, 3, rng);

  auto rep = evaluate_case(pred, tgt, {1, 2}, 1.0, 1.0);
  REQUIRE(rep.per_class.size() == 2);
  double dsc_sum = 0.0;
  for (size_t ci = 0; ci < 2; ++ci) {
    int32_t cls = rep.per_class[ci].cls;
    CHECK(rep.per_class[ci].dsc == oracle::dsc(pred.v, tgt.v, cls));
    double s = 0.0;
    int64_t n = 0;
    for (int64_t b = 0; b < 3; ++b) {
      std::vector<int32_t> ps(pred.v.begin() + b * 144, pred.v.begin() + (b + 1) * 144);
      std::vector<int32_t> ts(tgt.v.begin() + b * 144, tgt.v.begin() + (b + 1) * 144);
      double h = oracle::hd95_bruteforce(ps, ts, 12, 12, cls, 1.0, 1.0);
      if (h >= 0) {
        s += h;
        ++n;
      }
    }
    REQUIRE(rep.per_class[ci].hd_defined == (n > 0));
    if (n > 0) CHECK(rep.per_class[ci].hd95 == doctest::Approx(s / n).epsilon(1e-12));
    dsc_sum += rep.per_class[ci].dsc;
  }
  CHECK(rep.mean_dsc == doctest::Approx(dsc_sum / 2).epsilon(1e-12));

  // perfect prediction
  auto perfect = evaluate_case(tgt, tgt, {1, 2});
  CHECK(perfect.mean_dsc == 1.0);
  for (auto& cm : perfect.per_class) {
    CHECK(cm.dsc == 1.0);
    CHECK(cm.hd_defined);
    CHECK(cm.hd95 == 0.0);
  }

  // all-background prediction
  LabelMask bg(Shape{3, 12, 12});
  auto worst = evaluate_case(bg, tgt, {1, 2});
  for (auto& cm : worst.per_class) {
    CHECK(cm.dsc == 0.0);
    CHECK(!cm.hd_defined);
    CHECK(cm.hd95 == kHdUndefined);
  }
  CHECK(worst.hd_defined_classes == 0);
  CHECK(worst.mean_hd95 == kHdUndefined);
  CHECK(worst.to_text().find("undefined") != std::string::npos);
  CHECK(perfect.to_text().find("undefined") == std::string::npos);

  CHECK_THROWS_AS(evaluate_case(pred, tgt, {}), Error);
}
