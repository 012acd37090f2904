#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gcunet/rng.hpp"
#include "gcunet/tape.hpp"
#include "gcunet/tensor.hpp"

namespace gcunet {

// Central-difference comparison against tape gradients, always in double.
// rel = |analytic - fd| / max(|analytic|, |fd|, 1e-6).

struct CheckItem {
  std::string name;
  double max_rel_err = 0.0;
  int64_t coords = 0;
};

struct CheckReport {
  std::vector<CheckItem> items;

  double worst() const {
    double w = 0;
    for (const auto& it : items) w = std::max(w, it.max_rel_err);
    return w;
  }
  bool all_below(double tol) const { return worst() < tol; }

  void merge(const CheckReport& other) {
    items.insert(items.end(), other.items.begin(), other.items.end());
  }

  void print(FILE* f = stdout) const {
    for (const auto& it : items)
      std::fprintf(f, "  %-44s coords=%-5lld max_rel_err=%.3e\n", it.name.c_str(),
                   static_cast<long long>(it.coords), it.max_rel_err);
  }
};

using NamedParams = std::vector<std::pair<std::string, Tensor<double>>>;

// fn re-evaluates the scalar loss from current param values. Checks every
// coordinate when max_coords < 0, otherwise a deterministic sample.
inline CheckReport fd_check(const std::string& name, const std::function<Tensor<double>()>& fn,
                            const NamedParams& params, double h = 1e-4, int64_t max_coords = -1,
                            uint64_t seed = 1234) {
  for (const auto& [pname, p] : params) {
    (void)pname;
    const_cast<Tensor<double>&>(p).zero_grad();
  }
  double base;
  std::vector<std::vector<double>> analytic;
  {
    TapeScope<double> scope;
    Tensor<double> loss = fn();
    base = loss.item();
    backward(loss);
    for (const auto& [pname, p] : params) {
      (void)pname;
      analytic.push_back(p.grad());
    }
  }
  (void)base;
  CheckReport report;
  Rng rng(seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = const_cast<Tensor<double>&>(params[pi].second);
    int64_t n = p.numel();
    std::vector<int64_t> coords;
    if (max_coords < 0 || n <= max_coords) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      // distinct deterministic sample
      std::vector<int64_t> pool(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
      for (int64_t i = 0; i < max_coords; ++i) {
        int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint32_t>(n - i)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        coords.push_back(pool[static_cast<size_t>(i)]);
      }
    }
    CheckItem item;
    item.name = name + "/" + params[pi].first;
    item.coords = static_cast<int64_t>(coords.size());
    for (int64_t c : coords) {
      double saved = p.values()[static_cast<size_t>(c)];
      p.values()[static_cast<size_t>(c)] = saved + h;
      double lp = fn().item();
      p.values()[static_cast<size_t>(c)] = saved - h;
      double lm = fn().item();
      p.values()[static_cast<size_t>(c)] = saved;
      double fd = (lp - lm) / (2 * h);
      double an = analytic[pi][static_cast<size_t>(c)];
      double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      item.max_rel_err = std::max(item.max_rel_err, rel);
    }
    report.items.push_back(std::move(item));
  }
  return report;
}

}  // namespace gcunet
