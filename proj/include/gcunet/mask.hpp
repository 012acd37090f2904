#pragma once

#include <cstdint>
#include <vector>

#include "gcunet/tensor.hpp"

namespace gcunet {

// Integer label map, [H,W] for a single case or [B,H,W] for a batch.
struct LabelMask {
  Shape shape;
  std::vector<int32_t> v;

  LabelMask() = default;
  explicit LabelMask(Shape s, int32_t fill = 0)
      : shape(std::move(s)), v(static_cast<size_t>(numel_of(shape)), fill) {}

  int64_t numel() const { return static_cast<int64_t>(v.size()); }

  int32_t max_label() const {
    int32_t m = 0;
    for (int32_t x : v)
      if (x > m) m = x;
    return m;
  }

  void check_range(int64_t num_classes, const char* where) const {
    for (int32_t x : v)
      if (x < 0 || x >= num_classes)
        fail_shape(std::string(where) + ": label " + std::to_string(x) +
                   " outside [0, " + std::to_string(num_classes) + ")");
  }
};

}  // namespace gcunet
