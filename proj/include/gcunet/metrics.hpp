#pragma once

#include <string>
#include <vector>

#include "gcunet/mask.hpp"

namespace gcunet {

inline constexpr double kHdUndefined = -1.0;

// 2|P∩T| / (|P|+|T|) pooled over the whole mask; both sets empty -> 1,
// exactly one empty -> 0.
double dsc(const LabelMask& pred, const LabelMask& target, int32_t cls);

// 95th percentile (linear interpolation between order statistics) of the
// pooled bidirectional surface distances on one 2-D slice ([H,W] or [1,H,W]),
// Euclidean with per-axis spacing. Returns kHdUndefined when either surface
// is empty. Fast path: separable squared distance transform that forms the
// same (delta*spacing)^2 terms as an all-pairs scan, so results agree exactly.
double hd95(const LabelMask& pred, const LabelMask& target, int32_t cls, double sy = 1.0,
            double sx = 1.0);

struct ClassMetrics {
  int32_t cls = 0;
  double dsc = 0.0;
  double hd95 = kHdUndefined;
  bool hd_defined = false;
};

struct CaseReport {
  std::vector<ClassMetrics> per_class;
  double mean_dsc = 0.0;
  double mean_hd95 = kHdUndefined;  // over classes with a defined hd95
  int64_t hd_defined_classes = 0;
  std::string to_text() const;
};

// volume [B,H,W] (or a single [H,W] slice): per-class DSC pooled over the
// volume; per-class HD95 averaged over slices where both surfaces exist.
CaseReport evaluate_case(const LabelMask& pred, const LabelMask& target,
                         const std::vector<int32_t>& classes, double sy = 1.0, double sx = 1.0);

}  // namespace gcunet
