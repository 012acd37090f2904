#pragma once

#include <map>
#include <string>
#include <vector>

#include "gcunet/losses.hpp"
#include "gcunet/model.hpp"

namespace gcunet {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables clipping
  int64_t batch_size = 24;
  int64_t max_epochs = 150;
  LossWeights loss;
  int64_t eval_every = 1;
  int64_t patience = 10;
  bool augment = false;
  uint64_t seed = 42;

  void validate() const {
    std::vector<std::string> errs;
    auto bad = [&](const std::string& m) { errs.push_back(m); };
    if (learning_rate < 0) bad("learning_rate must be >= 0, got " + std::to_string(learning_rate));
    if (weight_decay < 0) bad("weight_decay must be >= 0, got " + std::to_string(weight_decay));
    if (beta1 < 0 || beta1 >= 1) bad("beta1 must be in [0,1), got " + std::to_string(beta1));
    if (beta2 < 0 || beta2 >= 1) bad("beta2 must be in [0,1), got " + std::to_string(beta2));
    if (eps <= 0) bad("eps must be > 0, got " + std::to_string(eps));
    if (clip_norm < 0) bad("clip_norm must be >= 0, got " + std::to_string(clip_norm));
    if (batch_size < 1) bad("batch_size must be >= 1, got " + std::to_string(batch_size));
    if (max_epochs < 1) bad("max_epochs must be >= 1, got " + std::to_string(max_epochs));
    if (eval_every < 1) bad("eval_every must be >= 1, got " + std::to_string(eval_every));
    if (patience < 1) bad("patience must be >= 1, got " + std::to_string(patience));
    try {
      loss.validate();
    } catch (const Error& e) {
      bad(e.what());
    }
    if (!errs.empty()) {
      std::string all = "invalid training configuration:";
      for (const auto& e : errs) all += "\n  - " + e;
      fail_config(all);
    }
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
  }
};

// flat key=value lines, '#' comments; unknown keys are collected and rejected
// together with every other parse problem in a single error
RunConfig parse_config_text(const std::string& text, const std::string& origin);
RunConfig parse_config_file(const std::string& path);

// one sorted key=value line per field; parse(serialize(c)) == c
std::string serialize_config(const RunConfig& c);

// apply k=v overrides (CLI) on top of a parsed config
void apply_override(RunConfig& c, const std::string& key, const std::string& value);

}  // namespace gcunet
