#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gcunet/common.hpp"
#include "gcunet/rng.hpp"

namespace gcunet {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Values + (lazily allocated) gradient for one node. Tensor handles share
// this, so copies of a Tensor alias the same storage.
template <class S>
struct TensorData {
  Shape shape;
  std::vector<S> v;
  std::vector<S> g;  // empty until a gradient is accumulated
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), S(0));
  }
};

template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0)) : d_(std::make_shared<TensorData<S>>()) {
    for (int64_t d : shape)
      if (d <= 0) fail_shape("tensor extent must be positive, got " + shape_str(shape));
    d_->shape = std::move(shape);
    d_->v.assign(static_cast<size_t>(numel_of(d_->shape)), fill);
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), S(0)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), S(1)); }
  static Tensor full(Shape s, S value) { return Tensor(std::move(s), value); }
  static Tensor scalar(S value) { return Tensor(Shape{}, value); }

  static Tensor from(Shape s, std::vector<S> values) {
    Tensor t(std::move(s));
    if (static_cast<int64_t>(values.size()) != t.numel())
      fail_shape("value count " + std::to_string(values.size()) + " does not match shape " +
                 shape_str(t.shape()));
    t.d_->v = std::move(values);
    return t;
  }

  static Tensor uniform(Shape s, Rng& rng, S lo = S(0), S hi = S(1)) {
    Tensor t(std::move(s));
    for (auto& x : t.d_->v) x = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape s, Rng& rng, S mean = S(0), S stddev = S(1)) {
    Tensor t(std::move(s));
    for (auto& x : t.d_->v) x = static_cast<S>(mean + stddev * rng.normal());
    return t;
  }

  // Weight init: truncated standard normal (|z| <= 2) scaled by 0.02.
  static Tensor trunc_normal_param(Shape s, Rng& rng, S stddev = S(0.02)) {
    Tensor t(std::move(s));
    for (auto& x : t.d_->v) x = static_cast<S>(stddev * rng.truncated_normal(2.0));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int64_t rank() const { return static_cast<int64_t>(d_->shape.size()); }
  int64_t dim(int64_t i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return d_->numel(); }

  std::vector<S>& values() { return d_->v; }
  const std::vector<S>& values() const { return d_->v; }
  S* data() { return d_->v.data(); }
  const S* data() const { return d_->v.data(); }

  S item() const {
    if (numel() != 1) fail(ErrorKind::usage, "item() on tensor of shape " + shape_str(shape()));
    return d_->v[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  bool has_grad() const { return !d_->g.empty(); }
  std::vector<S>& grad() {
    d_->ensure_grad();
    return d_->g;
  }
  const std::vector<S>& grad() const {
    d_->ensure_grad();
    return d_->g;
  }
  void zero_grad() {
    if (!d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), S(0));
  }

  std::shared_ptr<TensorData<S>> node() const { return d_; }

  // Deep copy of values (fresh storage, no grad, no requires_grad).
  Tensor clone_values() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<S>>();
    t.d_->shape = d_->shape;
    t.d_->v = d_->v;
    return t;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> t(shape());
    for (int64_t i = 0; i < numel(); ++i) t.data()[i] = static_cast<T>(d_->v[static_cast<size_t>(i)]);
    return t;
  }

 private:
  std::shared_ptr<TensorData<S>> d_;
};

template <class S>
inline void check_finite(const Tensor<S>& t, const char* op) {
  if (!Runtime::finite_checks()) return;
  for (S x : t.values())
    if (!std::isfinite(static_cast<double>(x)))
      fail(ErrorKind::numeric, std::string("non-finite value produced by ") + op);
}

}  // namespace gcunet
