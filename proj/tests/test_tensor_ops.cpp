#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gcunet/gradcheck.hpp"
#include "gcunet/ops.hpp"

using namespace gcunet;

using T = Tensor<double>;

static T param(Shape s, std::vector<double> v) {
  T t = T::from(std::move(s), std::move(v));
  t.set_requires_grad(true);
  return t;
}

static T rand_param(Shape s, Rng& rng) {
  T t = T::normal(std::move(s), rng, 0.0, 1.0);
  t.set_requires_grad(true);
  return t;
}

TEST_CASE("pcg32 matches the reference stream") {
  // seed 42, stream 54: published first outputs of the pcg32 demo program
  Rng r(42, 54);
  CHECK(r.next_u32() == 0xa15c02b7u);
  CHECK(r.next_u32() == 0x7b47f409u);
  CHECK(r.next_u32() == 0xba1d3330u);
  CHECK(r.next_u32() == 0x83d2f293u);
}

TEST_CASE("rng streams are reproducible and split streams are independent") {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u32() == b.next_u32());
  Rng base(9);
  Rng c1 = base.split("epoch", 0);
  Rng c2 = base.split("epoch", 0);
  Rng c3 = base.split("epoch", 1);
  CHECK(c1.next_u64() == c2.next_u64());
  CHECK(c1.next_u64() != c3.next_u64());
  Rng c4 = base.split("other", 0);
  Rng c5 = base.split("epoch", 0);
  c5.next_u64();  // skip the value c1 consumed
  CHECK(c4.next_u64() != c5.next_u64());
}

TEST_CASE("normal and truncated normal draws have the expected spread") {
  Rng r(123);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
  double tsq = 0;
  for (int i = 0; i < n; ++i) {
    double z = r.truncated_normal(2.0);
    CHECK(std::abs(z) <= 2.0);
    tsq += z * z;
  }
  // variance of a +-2 truncated standard normal is about 0.774
  CHECK(std::abs(tsq / n - 0.774) < 0.03);
}

TEST_CASE("uniform below bound is in range and deterministic") {
  Rng r(5), r2(5);
  for (int i = 0; i < 1000; ++i) {
    uint32_t v = r.below(17);
    CHECK(v < 17u);
    CHECK(v == r2.below(17));
  }
}

TEST_CASE("elementwise add broadcasts trailing dims") {
  T a = T::ones({2, 3});
  T b = T::from({3}, {1, 2, 3});
  T c = add(a, b);
  CHECK(c.shape() == Shape{2, 3});
  for (int r = 0; r < 2; ++r)
    for (int k = 0; k < 3; ++k) CHECK(c.values()[r * 3 + k] == doctest::Approx(1.0 + k + 1));
}

TEST_CASE("broadcast against leading batch dim") {
  T a = T::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  T b = T::from({2, 2}, {10, 20, 30, 40});
  T c = mul(a, b);
  CHECK(c.values()[0] == 10);
  CHECK(c.values()[3] == 160);
  CHECK(c.values()[4] == 50);
  CHECK(c.values()[7] == 320);
}

TEST_CASE("incompatible shapes raise a shape error") {
  T a = T::ones({2, 3});
  T b = T::ones({2, 4});
  CHECK_THROWS_AS(add(a, b), Error);
  try {
    add(a, b);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::shape);
  }
}

TEST_CASE("binary op gradients, including broadcast reduction") {
  Rng rng(11);
  T a = rand_param({2, 3}, rng);
  T b = rand_param({3}, rng);
  auto fn = [&]() { return sum_all(mul(add(a, b), sub(a, 0.5 * b))); };
  auto rep = fd_check("binary", fn, {{"a", a}, {"b", b}});
  CHECK(rep.worst() < 1e-6);
}

TEST_CASE("division gradient") {
  Rng rng(13);
  T a = rand_param({4}, rng);
  T b = param({4}, {1.5, 2.0, -1.25, 3.0});
  auto fn = [&]() { return sum_all(div(a, b)); };
  CHECK(fd_check("div", fn, {{"a", a}, {"b", b}}).worst() < 1e-6);
}

TEST_CASE("unary activations: values and gradients") {
  T x = param({5}, {-2.0, -0.5, 0.1, 0.9, 3.0});
  CHECK(relu(x).values()[0] == 0.0);
  CHECK(relu(x).values()[4] == 3.0);
  // gelu(1) = 0.5 * (1 + erf(1/sqrt(2))) = 0.841344...
  T g = gelu(param({1}, {1.0}));
  CHECK(g.values()[0] == doctest::Approx(0.8413447461).epsilon(1e-9));
  T s = sigmoid(param({1}, {0.0}));
  CHECK(s.values()[0] == doctest::Approx(0.5));
  for (auto* name : {"gelu", "sigmoid", "exp"}) {
    std::string n = name;
    auto fn = [&]() {
      if (n == "gelu") return sum_all(gelu(x));
      if (n == "sigmoid") return sum_all(sigmoid(x));
      return sum_all(gcunet::exp(x));
    };
    CHECK(fd_check(n, fn, {{"x", x}}).worst() < 1e-6);
  }
  T pos = param({3}, {0.2, 1.0, 4.0});
  CHECK(fd_check("log", [&]() { return sum_all(gcunet::log(pos)); }, {{"x", pos}}).worst() < 1e-6);
  CHECK(fd_check("sqrt", [&]() { return sum_all(gcunet::sqrt(pos)); }, {{"x", pos}}).worst() < 1e-6);
}

TEST_CASE("scalar operator chain gradient") {
  Rng rng(17);
  T x = rand_param({3, 3}, rng);
  auto fn = [&]() { return mean_all(1.0 - (2.0 * x + 0.25) / 3.0); };
  CHECK(fd_check("scalar_chain", fn, {{"x", x}}).worst() < 1e-6);
}

TEST_CASE("reduce_sum and reduce_mean over chosen axes") {
  T x = T::from({2, 3}, {1, 2, 3, 4, 5, 6});
  T s0 = reduce_sum(x, {0});
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.values() == std::vector<double>{5, 7, 9});
  T s1 = reduce_sum(x, {1}, true);
  CHECK(s1.shape() == Shape{2, 1});
  CHECK(s1.values() == std::vector<double>{6, 15});
  T m = reduce_mean(x, {0, 1});
  CHECK(m.rank() == 0);
  CHECK(m.item() == doctest::Approx(3.5));

  Rng rng(19);
  T p = rand_param({2, 3, 4}, rng);
  CHECK(fd_check("reduce_sum", [&]() { return sum_all(mul(reduce_sum(p, {1}), reduce_sum(p, {1}))); },
                 {{"p", p}})
            .worst() < 1e-6);
  CHECK(fd_check("reduce_mean", [&]() { return sum_all(mul(reduce_mean(p, {0, 2}), reduce_mean(p, {0, 2}))); },
                 {{"p", p}})
            .worst() < 1e-6);
}

TEST_CASE("reduce_max takes the first maximum on ties") {
  T x = param({1, 4}, {1.0, 7.0, 7.0, 2.0});
  {
    TapeScope<double> scope;
    T y = reduce_max(x, 1);
    CHECK(y.item() == 7.0);
    backward(y);
  }
  CHECK(x.grad() == std::vector<double>{0, 1, 0, 0});
  Rng rng(23);
  T p = rand_param({3, 5}, rng);
  CHECK(fd_check("reduce_max", [&]() { return sum_all(reduce_max(p, 1)); }, {{"p", p}}).worst() < 1e-6);
}

TEST_CASE("softmax rows sum to one and match closed form") {
  T x = T::from({1, 2}, {0.0, std::log(2.0)});
  T y = softmax(x, 1);
  CHECK(y.values()[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));
  Rng rng(29);
  T p = rand_param({2, 4, 3}, rng);
  // softmax over the middle axis, weighted so the gradient is nontrivial
  T w = T::normal({2, 4, 3}, rng);
  CHECK(fd_check("softmax", [&]() { return sum_all(mul(softmax(p, 1), w)); }, {{"p", p}}).worst() <
        1e-6);
  // shift invariance
  T y1 = softmax(p, 2);
  T y2 = softmax(scalar_add(p, 123.0), 2);
  for (int64_t i = 0; i < y1.numel(); ++i)
    CHECK(y1.values()[static_cast<size_t>(i)] ==
          doctest::Approx(y2.values()[static_cast<size_t>(i)]).epsilon(1e-9));
}

TEST_CASE("log_softmax equals log of softmax") {
  Rng rng(31);
  T p = rand_param({3, 6}, rng);
  T a = log_softmax(p, 1);
  T b = gcunet::log(softmax(p, 1));
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(a.values()[static_cast<size_t>(i)] ==
          doctest::Approx(b.values()[static_cast<size_t>(i)]).epsilon(1e-9));
  T w = T::normal({3, 6}, rng);
  CHECK(fd_check("log_softmax", [&]() { return sum_all(mul(log_softmax(p, 1), w)); }, {{"p", p}})
            .worst() < 1e-6);
}

TEST_CASE("layer_norm normalizes rows and handles affine params") {
  T x = param({2, 4}, {1, 2, 3, 4, -1, 0, 1, 2});
  T gamma = param({4}, {1, 1, 1, 1});
  T beta = param({4}, {0, 0, 0, 0});
  T y = layer_norm(x, gamma, beta);
  for (int r = 0; r < 2; ++r) {
    double mean = 0, var = 0;
    for (int k = 0; k < 4; ++k) mean += y.values()[r * 4 + k];
    mean /= 4;
    for (int k = 0; k < 4; ++k) var += std::pow(y.values()[r * 4 + k] - mean, 2);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var / 4 == doctest::Approx(1.0).epsilon(1e-4));
  }
  // constant row maps to beta
  T cx = T::full({1, 4}, 3.25);
  T cb = param({4}, {0.5, -0.5, 1.0, 2.0});
  T cy = layer_norm(cx, gamma, cb);
  for (int k = 0; k < 4; ++k) CHECK(cy.values()[k] == doctest::Approx(cb.values()[k]));

  Rng rng(37);
  T p = rand_param({3, 5}, rng);
  T g2 = rand_param({5}, rng);
  T b2 = rand_param({5}, rng);
  T w = T::normal({3, 5}, rng);
  auto fn = [&]() { return sum_all(mul(layer_norm(p, g2, b2), w)); };
  CHECK(fd_check("layer_norm", fn, {{"x", p}, {"gamma", g2}, {"beta", b2}}).worst() < 1e-5);
}

TEST_CASE("matmul values and gradients") {
  T a = T::from({2, 3}, {1, 2, 3, 4, 5, 6});
  T b = T::from({3, 2}, {7, 8, 9, 10, 11, 12});
  T c = matmul(a, b);
  CHECK(c.values() == std::vector<double>{58, 64, 139, 154});

  Rng rng(41);
  T pa = rand_param({2, 3, 4}, rng);
  T pb = rand_param({2, 4, 2}, rng);
  CHECK(fd_check("matmul_batched", [&]() { return sum_all(matmul(pa, pb)); },
                 {{"a", pa}, {"b", pb}})
            .worst() < 1e-6);
  T shared = rand_param({4, 2}, rng);
  CHECK(fd_check("matmul_shared_b", [&]() { return sum_all(matmul(pa, shared)); },
                 {{"a", pa}, {"b", shared}})
            .worst() < 1e-6);
  CHECK_THROWS_AS(matmul(T::ones({2, 3}), T::ones({4, 2})), Error);
}

TEST_CASE("matmul counts multiply-accumulates") {
  MacScope macs;
  matmul(T::ones({2, 3, 4}), T::ones({2, 4, 5}));
  CHECK(macs.macs() == 2 * 3 * 4 * 5);
}

TEST_CASE("linear applies weight and bias") {
  T x = T::from({2, 3}, {1, 0, 0, 0, 1, 0});
  T w = T::from({2, 3}, {1, 2, 3, 4, 5, 6});
  T b = T::from({2}, {0.5, -0.5});
  T y = linear(x, w, b);
  CHECK(y.shape() == Shape{2, 2});
  CHECK(y.values() == std::vector<double>{1.5, 3.5, 2.5, 4.5});

  Rng rng(43);
  T px = rand_param({2, 2, 3}, rng);
  T pw = rand_param({4, 3}, rng);
  T pb = rand_param({4}, rng);
  auto fn = [&]() { return sum_all(mul(linear(px, pw, pb), linear(px, pw, pb))); };
  CHECK(fd_check("linear", fn, {{"x", px}, {"w", pw}, {"b", pb}}).worst() < 1e-6);
}

TEST_CASE("reshape and permute round trip bit-identically") {
  Rng rng(47);
  T x = T::normal({2, 3, 4}, rng);
  T r = reshape(reshape(x, {4, 6}), {2, 3, 4});
  CHECK(r.values() == x.values());
  T p = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  CHECK(p.values() == x.values());
  CHECK_THROWS_AS(reshape(x, {5, 5}), Error);
  CHECK_THROWS_AS(permute(x, {0, 0, 1}), Error);

  T px = rand_param({2, 3, 4}, rng);
  T w = T::normal({4, 3, 2}, rng);
  auto fn = [&]() { return sum_all(mul(permute(px, {2, 1, 0}), w)); };
  CHECK(fd_check("permute", fn, {{"x", px}}).worst() < 1e-6);
}

TEST_CASE("reshape infers a single -1 extent") {
  T x = T::ones({2, 3, 4});
  CHECK(reshape(x, {6, -1}).shape() == Shape{6, 4});
  CHECK(reshape(x, {-1}).shape() == Shape{24});
  CHECK_THROWS_AS(reshape(x, {-1, -1}), Error);
  CHECK_THROWS_AS(reshape(x, {-1, 5}), Error);
}

TEST_CASE("concat and split are inverses") {
  Rng rng(53);
  T a = T::normal({2, 2, 3}, rng);
  T b = T::normal({2, 1, 3}, rng);
  T c = concat<double>({a, b}, 1);
  CHECK(c.shape() == Shape{2, 3, 3});
  auto parts = split(c, {2, 1}, 1);
  CHECK(parts[0].values() == a.values());
  CHECK(parts[1].values() == b.values());

  T pa = rand_param({2, 2, 3}, rng);
  T pb = rand_param({2, 1, 3}, rng);
  T w = T::normal({2, 3, 3}, rng);
  auto fn = [&]() { return sum_all(mul(concat<double>({pa, pb}, 1), w)); };
  CHECK(fd_check("concat", fn, {{"a", pa}, {"b", pb}}).worst() < 1e-6);

  T pc = rand_param({2, 3, 3}, rng);
  auto fn2 = [&]() {
    auto ps = split(pc, {1, 2}, 1);
    return sum_all(mul(ps[0], ps[0])) + 2.0 * sum_all(ps[1]);
  };
  CHECK(fd_check("split", fn2, {{"c", pc}}).worst() < 1e-6);
  CHECK_THROWS_AS(split(c, {2, 2}, 1), Error);
}

TEST_CASE("repeat_interleave0 repeats rows consecutively") {
  T x = T::from({2, 2}, {1, 2, 3, 4});
  T y = repeat_interleave0(x, 3);
  CHECK(y.shape() == Shape{6, 2});
  CHECK(y.values() == std::vector<double>{1, 2, 1, 2, 1, 2, 3, 4, 3, 4, 3, 4});
  Rng rng(59);
  T p = rand_param({2, 3}, rng);
  T w = T::normal({4, 3}, rng);
  auto fn = [&]() { return sum_all(mul(repeat_interleave0(p, 2), w)); };
  CHECK(fd_check("repeat_interleave0", fn, {{"p", p}}).worst() < 1e-6);
}

TEST_CASE("index_rows gathers and scatter-adds the gradient") {
  T table = param({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<int64_t> idx{2, 0, 2};
  T y = index_rows(table, idx);
  CHECK(y.values() == std::vector<double>{5, 6, 1, 2, 5, 6});
  {
    TapeScope<double> scope;
    T z = sum_all(index_rows(table, idx));
    backward(z);
  }
  CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2});
  CHECK_THROWS_AS(index_rows(table, std::vector<int64_t>{3}), Error);
  auto fn = [&]() { return sum_all(mul(index_rows(table, idx), index_rows(table, idx))); };
  CHECK(fd_check("index_rows", fn, {{"table", table}}).worst() < 1e-6);
}

TEST_CASE("select_class picks the labelled channel") {
  // logits [1,2,2,2]: channel 0 = {1,2,3,4}, channel 1 = {10,20,30,40}
  T x = param({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  LabelMask m(Shape{1, 2, 2});
  m.v = {0, 1, 1, 0};
  T y = select_class(x, m);
  CHECK(y.values() == std::vector<double>{1, 20, 30, 4});
  LabelMask bad(Shape{1, 2, 2});
  bad.v = {0, 2, 0, 0};
  CHECK_THROWS_AS(select_class(x, bad), Error);
  auto fn = [&]() { return sum_all(mul(select_class(x, m), select_class(x, m))); };
  CHECK(fd_check("select_class", fn, {{"x", x}}).worst() < 1e-6);
}

TEST_CASE("one_hot and argmax_channel round trip") {
  LabelMask m(Shape{1, 2, 2});
  m.v = {0, 2, 1, 0};
  T oh = one_hot<double>(m, 3);
  CHECK(oh.shape() == Shape{1, 3, 2, 2});
  LabelMask back = argmax_channel(oh);
  CHECK(back.v == m.v);
  // ties resolve to the lowest class
  T flat = T::zeros({1, 3, 1, 1});
  CHECK(argmax_channel(flat).v[0] == 0);
}

TEST_CASE("global_avg_pool averages spatial dims") {
  T x = T::from({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  T y = global_avg_pool(x);
  CHECK(y.shape() == Shape{1, 2});
  CHECK(y.values() == std::vector<double>{2.5, 25.0});
}

TEST_CASE("finite checks flag non-finite op outputs") {
  bool saved = Runtime::finite_checks();
  Runtime::finite_checks() = true;
  T a = T::ones({2});
  T z = T::zeros({2});
  CHECK_THROWS_AS(div(a, z), Error);
  try {
    div(a, z);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
    CHECK(e.exit_code() == 2);
  }
  Runtime::finite_checks() = saved;
}

TEST_CASE("backward requires a scalar loss and an active tape") {
  T x = param({2}, {1, 2});
  CHECK_THROWS_AS(backward(x), Error);
  TapeScope<double> scope;
  T y = scalar_mul(x, 2.0);
  CHECK_THROWS_AS(backward(y), Error);
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  T x = param({2}, {1.0, 2.0});
  {
    TapeScope<double> scope;
    backward(sum_all(x));
  }
  {
    TapeScope<double> scope;
    backward(sum_all(x));
  }
  CHECK(x.grad() == std::vector<double>{2, 2});
  x.zero_grad();
  CHECK(x.grad() == std::vector<double>{0, 0});
}

TEST_CASE("same tensor used twice accumulates both paths") {
  T x = param({1}, {3.0});
  {
    TapeScope<double> scope;
    backward(sum_all(mul(x, x)));  // d/dx x^2 = 2x
  }
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("ops outside a tape do not record or mark outputs") {
  T x = param({2}, {1, 2});
  T y = scalar_mul(x, 3.0);
  CHECK(!y.requires_grad());
}

TEST_CASE("grad corruption hook perturbs a chosen op's adjoint") {
  T x = param({2}, {1.0, 2.0});
  GradCorruption::op() = "scalar_mul";
  {
    TapeScope<double> scope;
    backward(sum_all(scalar_mul(x, 2.0)));
  }
  GradCorruption::op() = "";
  CHECK(x.grad()[0] == doctest::Approx(3.0));  // 2 * 1.5
}
