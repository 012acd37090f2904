#pragma once

#include <string>

#include "gcunet/gradcheck.hpp"

namespace gcunet {

// Shared pass tolerance for all gradcheck granularities (64-bit, central
// differences at h=1e-4; composites with normalization sit well under this).
inline constexpr double kGradTol = 1e-3;

// Finite-difference sweeps at three granularities. Each returns one report
// item per checked (case, parameter) pair; pass = report.all_below(kGradTol).
CheckReport gradcheck_ops();     // every primitive backward implementation
CheckReport gradcheck_blocks();  // parameterized modules, randomized weights
CheckReport gradcheck_model();   // tiny full network through the training loss

// scale: "ops", "block" or "model"
CheckReport run_gradcheck(const std::string& scale);

}  // namespace gcunet
