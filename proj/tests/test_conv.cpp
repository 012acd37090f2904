#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gcunet/conv.hpp"
#include "gcunet/gradcheck.hpp"
#include "oracles.hpp"

using namespace gcunet;
using T = Tensor<double>;

static T rand_param(Shape s, Rng& rng) {
  T t = T::normal(std::move(s), rng, 0.0, 1.0);
  t.set_requires_grad(true);
  return t;
}

static void check_close(const std::vector<double>& a, const std::vector<double>& b,
                        double tol = 1e-10) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

TEST_CASE("conv2d matches the sliding-window oracle (dense, strided, padded)") {
  Rng rng(42);
  for (auto [C, O, g, s, p] : {std::tuple{3, 4, 1, 1, 1}, {4, 4, 2, 1, 1}, {3, 2, 1, 2, 0},
                               {2, 6, 2, 2, 1}}) {
    T x = T::normal({2, C, 7, 9}, rng);
    T w = T::normal({O, C / g, 3, 3}, rng, 0.0, 0.5);
    T b = T::normal({O}, rng);
    T y = conv2d(x, w, b, s, p, g);
    auto ref = oracle::conv2d<double>(x.values(), 2, C, 7, 9, w.values(), O, 3, 3, &b.values(), s, p, g);
    check_close(y.values(), ref, 1e-9);
  }
}

TEST_CASE("depthwise conv equals the oracle exactly") {
  // groups == channels == filters takes the direct-loop path whose
  // accumulation order matches the oracle term for term
  Rng rng(42);
  T x = T::normal({1, 2, 5, 5}, rng);
  T w = T::normal({2, 1, 3, 3}, rng);
  T y = conv2d(x, w, 1, 1, 2);
  auto ref = oracle::conv2d<double>(x.values(), 1, 2, 5, 5, w.values(), 2, 3, 3, nullptr, 1, 1, 2);
  CHECK(y.values() == ref);
  // also exact in float
  Tensor<float> xf = x.cast<float>();
  Tensor<float> wf = w.cast<float>();
  auto yf = conv2d(xf, wf, 1, 1, 2);
  auto reff = oracle::conv2d<float>(xf.values(), 1, 2, 5, 5, wf.values(), 2, 3, 3, nullptr, 1, 1, 2);
  CHECK(yf.values() == reff);
}

TEST_CASE("conv2d output shape follows the padded stride formula") {
  T x = T::zeros({1, 3, 224, 224});
  T w = T::zeros({8, 3, 3, 3});
  CHECK(conv2d(x, w, 2, 1).shape() == Shape{1, 8, 112, 112});
  CHECK(conv2d(T::zeros({1, 4, 14, 14}), T::zeros({4, 4, 3, 3}), 2, 1).shape() ==
        Shape{1, 4, 7, 7});
  CHECK_THROWS_AS(conv2d(T::zeros({1, 3, 2, 2}), T::zeros({4, 3, 5, 5}), 1, 0), Error);
  CHECK_THROWS_AS(conv2d(x, T::zeros({8, 2, 3, 3}), 1, 1), Error);
  CHECK_THROWS_AS(conv2d(x, w, 1, 1, 2), Error);
}

TEST_CASE("conv2d gradients (dense, grouped, depthwise)") {
  Rng rng(7);
  for (auto [C, O, g] : {std::tuple{2, 3, 1}, {4, 2, 2}, {3, 3, 3}}) {
    T x = rand_param({1, C, 5, 5}, rng);
    T w = rand_param({O, C / g, 3, 3}, rng);
    T b = rand_param({O}, rng);
    auto fn = [&, g = g]() {
      T y = conv2d(x, w, b, 2, 1, g);
      return sum_all(mul(y, y));
    };
    auto rep = fd_check("conv", fn, {{"x", x}, {"w", w}, {"b", b}});
    CHECK(rep.worst() < 1e-6);
  }
}

TEST_CASE("conv2d counts multiply-accumulates") {
  // 1x1 conv, 2->2 channels, 4x4 image: 2*16*2 = 64 MACs
  MacScope macs;
  conv2d(T::ones({1, 2, 4, 4}), T::ones({2, 2, 1, 1}), 1, 0);
  CHECK(macs.macs() == 64);
}

TEST_CASE("conv2d_transpose matches the scatter oracle and doubles extent") {
  Rng rng(7);
  T x = T::normal({1, 2, 3, 3}, rng);
  T w = T::normal({2, 3, 2, 2}, rng);
  T y = conv2d_transpose(x, w, 2);
  CHECK(y.shape() == Shape{1, 3, 6, 6});
  auto ref = oracle::conv2d_transpose<double>(x.values(), 1, 2, 3, 3, w.values(), 3, 2, 2, nullptr, 2);
  check_close(y.values(), ref, 1e-9);
}

TEST_CASE("conv2d_transpose is the adjoint of the matching conv2d") {
  Rng rng(21);
  T u = T::normal({1, 2, 3, 3}, rng);   // upstream grad / tconv input
  T wc = T::normal({2, 3, 2, 2}, rng);  // conv weight [O=2, C=3, 2, 2]
  T z = rand_param({1, 3, 6, 6}, rng);
  T gz;
  {
    TapeScope<double> scope;
    T y = conv2d(z, wc, 2, 0);
    backward(sum_all(mul(y, Tensor<double>::from(u.shape(), u.values()))));
    gz = T::from(z.shape(), z.grad());
  }
  // same buffer reinterpreted as a [I=2, O=3, kh, kw] transposed-conv weight
  T yt = conv2d_transpose(u, wc, 2);
  check_close(gz.values(), yt.values(), 1e-9);
}

TEST_CASE("conv2d_transpose gradients") {
  Rng rng(11);
  T x = rand_param({1, 2, 3, 3}, rng);
  T w = rand_param({2, 3, 2, 2}, rng);
  T b = rand_param({3}, rng);
  auto fn = [&]() {
    T y = conv2d_transpose(x, w, b, 2);
    return sum_all(mul(y, y));
  };
  CHECK(fd_check("tconv", fn, {{"x", x}, {"w", w}, {"b", b}}).worst() < 1e-6);
}

TEST_CASE("maxpool2d picks window maxima and routes gradient to them") {
  T x = T::from({1, 1, 4, 4}, {1, 2, 3, 4,
                               5, 6, 7, 8,
                               9, 10, 11, 12,
                               13, 14, 15, 16});
  T y = maxpool2d(x, 2, 2, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.values() == std::vector<double>{6, 8, 14, 16});

  // 3x3 stride-2 pad-1 halves even extents
  CHECK(maxpool2d(T::zeros({1, 1, 14, 14}), 3, 2, 1).shape() == Shape{1, 1, 7, 7});

  T p = T::from({1, 1, 2, 2}, {5.0, 5.0, 1.0, 0.0});
  p.set_requires_grad(true);
  {
    TapeScope<double> scope;
    backward(sum_all(maxpool2d(p, 2, 2, 0)));
  }
  CHECK(p.grad() == std::vector<double>{1, 0, 0, 0});  // tie keeps the first cell

  Rng rng(13);
  T q = T::uniform({1, 2, 6, 6}, rng, -1.0, 1.0);
  q.set_requires_grad(true);
  auto fn = [&]() { return sum_all(maxpool2d(q, 3, 2, 1)); };
  CHECK(fd_check("maxpool", fn, {{"x", q}}).worst() < 1e-6);
}

TEST_CASE("bilinear_resize is identity at equal size and interpolates midpoints") {
  Rng rng(17);
  T x = T::normal({1, 2, 5, 7}, rng);
  T same = bilinear_resize(x, 5, 7);
  CHECK(same.values() == x.values());

  // 1x1x2x2 -> 4x4 with half-pixel centers: corners keep values, the center
  // cells mix 3:1
  T s = T::from({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  T up = bilinear_resize(s, 4, 4);
  CHECK(up.values()[0] == doctest::Approx(0.0));
  CHECK(up.values()[3] == doctest::Approx(1.0));
  CHECK(up.values()[5] == doctest::Approx(0.75));   // 0.75*0.25 mix of all four
  CHECK(up.values()[15] == doctest::Approx(3.0));

  T p = rand_param({1, 2, 3, 4}, rng);
  T w = T::normal({1, 2, 6, 8}, rng);
  auto fn = [&]() { return sum_all(mul(bilinear_resize(p, 6, 8), w)); };
  CHECK(fd_check("bilinear", fn, {{"p", p}}).worst() < 1e-6);
}
