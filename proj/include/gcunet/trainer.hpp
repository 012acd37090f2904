#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gcunet/checkpoint.hpp"
#include "gcunet/data.hpp"
#include "gcunet/losses.hpp"
#include "gcunet/metrics.hpp"
#include "gcunet/model.hpp"
#include "gcunet/tape.hpp"

namespace gcunet {

// Decoupled-weight-decay Adam over a parameter registry. Moments live in the
// parameter scalar type; per-element arithmetic runs in double. The update
// order is: moments, bias correction, multiplicative decay, then the step.
template <class S>
struct AdamW {
  double lr, wd, beta1, beta2, eps, clip_norm;
  int64_t t = 0;
  std::vector<std::vector<S>> m, v;

  explicit AdamW(const TrainConfig& c)
      : lr(c.learning_rate),
        wd(c.weight_decay),
        beta1(c.beta1),
        beta2(c.beta2),
        eps(c.eps),
        clip_norm(c.clip_norm) {}

  void attach(const Registry<S>& reg) {
    t = 0;
    m.assign(reg.items.size(), {});
    v.assign(reg.items.size(), {});
    for (size_t i = 0; i < reg.items.size(); ++i) {
      size_t n = static_cast<size_t>(reg.items[i].second.numel());
      m[i].assign(n, S(0));
      v[i].assign(n, S(0));
    }
  }

  void step(Registry<S>& reg) {
    if (m.size() != reg.items.size())
      fail(ErrorKind::usage, "optimizer is not attached to this parameter list");
    // validate every gradient before touching any parameter so a bad batch
    // never leaves the model half-updated
    double sq = 0;
    for (auto& [name, p] : reg.items) {
      for (S g : p.grad()) {
        double gd = static_cast<double>(g);
        if (!std::isfinite(gd)) fail(ErrorKind::numeric, "non-finite gradient in " + name);
        sq += gd * gd;
      }
    }
    double scale = 1.0;
    if (clip_norm > 0.0) {
      double norm = std::sqrt(sq);
      if (norm > clip_norm) scale = clip_norm / norm;
    }
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < reg.items.size(); ++i) {
      auto& p = reg.items[i].second;
      auto& vals = p.values();
      const auto& grads = p.grad();
      for (size_t j = 0; j < vals.size(); ++j) {
        double g = static_cast<double>(grads[j]) * scale;
        double mi = beta1 * static_cast<double>(m[i][j]) + (1.0 - beta1) * g;
        double vi = beta2 * static_cast<double>(v[i][j]) + (1.0 - beta2) * g * g;
        m[i][j] = static_cast<S>(mi);
        v[i][j] = static_cast<S>(vi);
        double pd = static_cast<double>(vals[j]) * (1.0 - lr * wd);
        pd -= lr * (static_cast<double>(m[i][j]) / bc1) /
              (std::sqrt(static_cast<double>(v[i][j]) / bc2) + eps);
        vals[j] = static_cast<S>(pd);
      }
    }
  }
};

// Argmax decode of [B,K,H,W] logits to a [B,H,W] label map.
LabelMask decode_mask(const Tensor<float>& logits);

struct EvalReport {
  int64_t cases = 0;
  std::vector<ClassMetrics> per_class;  // foreground classes, averaged over cases
  double mean_dsc = 0;                  // mean over foreground classes
  double mean_hd95 = kHdUndefined;      // over classes with any defined distance
  int64_t hd_defined_classes = 0;

  std::string to_text() const;
};

// Runs the model sample by sample (no tape, parameters untouched), argmax
// decodes, and aggregates foreground-class metrics across the dataset.
EvalReport evaluate(const GCtxUNet<float>& model, const Dataset& ds);

struct EpochRecord {
  int64_t epoch = 0;  // 0-based
  int64_t steps = 0;  // cumulative optimizer steps after this epoch
  double mean_loss = 0;
  bool evaluated = false;
  double val_dsc = 0;
};

struct TrainResult {
  std::vector<EpochRecord> log;  // epochs run by this invocation
  double best_metric = -1;
  int64_t epochs_completed = 0;  // total, including a resumed prefix
  bool early_stopped = false;
  bool diverged = false;
  std::string best_path, final_path, log_path;
};

// Full fit loop: shuffled minibatches, combined dice+ce loss, AdamW, periodic
// validation, early stopping on mean foreground DSC, checkpoints at every
// epoch boundary. Per-epoch RNG streams are derived from (seed, epoch), so a
// resumed run continues bit-identically to an uninterrupted one.
TrainResult train(const RunConfig& cfg, const Dataset& train_ds, const Dataset& val_ds,
                  const std::string& out_dir, const std::string& resume_path = "");

}  // namespace gcunet
