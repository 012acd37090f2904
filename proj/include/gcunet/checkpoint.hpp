#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gcunet/blocks.hpp"
#include "gcunet/config.hpp"

namespace gcunet {

// Optimizer snapshot stored alongside the weights so a run can resume exactly
// where it stopped. Moment buffers follow registry order.
struct OptSnapshot {
  uint64_t step = 0;        // optimizer steps taken so far
  uint64_t epoch = 0;       // epochs completed
  double best_metric = -1;  // best validation mean DSC seen
  uint64_t bad_epochs = 0;  // early-stopping counter
  std::vector<std::vector<float>> m, v;
};

struct Checkpoint {
  std::string config_text;  // canonical key=value form as stored in the file
  RunConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::optional<OptSnapshot> opt;
};

// Framed little-endian binary: magic "GCKP", u32 version, config text,
// named f32 tensors, optional optimizer state, trailing fnv1a-64 checksum.
void save_checkpoint(const std::string& path, const RunConfig& cfg,
                     const Registry<float>& params, const OptSnapshot* opt = nullptr);

Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into an already-built registry; every name must
// resolve and every shape must match, and all registry entries must be covered.
void apply_checkpoint(const Checkpoint& ck, Registry<float>& params);

}  // namespace gcunet
