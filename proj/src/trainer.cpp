#include "gcunet/trainer.hpp"

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace gcunet {

namespace {

std::string fmt_line(const char* fmt, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  return buf;
}

std::vector<int32_t> foreground_classes(int64_t num_classes) {
  std::vector<int32_t> cls;
  for (int64_t k = 1; k < num_classes; ++k) cls.push_back(static_cast<int32_t>(k));
  return cls;
}

}  // namespace

LabelMask decode_mask(const Tensor<float>& logits) {
  if (logits.rank() != 4) fail_shape("decode_mask expects [B,K,H,W], got " + shape_str(logits.shape()));
  int64_t B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  LabelMask out(Shape{B, H, W});
  const float* p = logits.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        int32_t arg = 0;
        float best = p[((b * K) * H + y) * W + x];
        for (int64_t k = 1; k < K; ++k) {
          float v = p[((b * K + k) * H + y) * W + x];
          if (v > best) {
            best = v;
            arg = static_cast<int32_t>(k);
          }
        }
        out.v[static_cast<size_t>((b * H + y) * W + x)] = arg;
      }
  return out;
}

std::string EvalReport::to_text() const {
  std::string out = "cases " + std::to_string(cases) + "\n";
  for (const auto& c : per_class) {
    if (c.hd_defined)
      out += fmt_line("class %d  dsc %.2f%%  hd95 %.4f\n", c.cls, 100.0 * c.dsc, c.hd95);
    else
      out += fmt_line("class %d  dsc %.2f%%  hd95 undefined\n", c.cls, 100.0 * c.dsc);
  }
  if (hd_defined_classes > 0)
    out += fmt_line("mean  dsc %.2f%%  hd95 %.4f\n", 100.0 * mean_dsc, mean_hd95);
  else
    out += fmt_line("mean  dsc %.2f%%  hd95 undefined\n", 100.0 * mean_dsc);
  return out;
}

EvalReport evaluate(const GCtxUNet<float>& model, const Dataset& ds) {
  if (ds.size() == 0) fail(ErrorKind::usage, "evaluate: empty dataset");
  if (ds.num_classes != model.cfg.num_classes)
    fail_config("dataset has " + std::to_string(ds.num_classes) + " classes but the model expects " +
                std::to_string(model.cfg.num_classes));
  std::vector<int32_t> cls = foreground_classes(model.cfg.num_classes);

  EvalReport rep;
  rep.cases = ds.size();
  std::vector<double> dsc_sum(cls.size(), 0.0);
  std::vector<double> hd_sum(cls.size(), 0.0);
  std::vector<int64_t> hd_n(cls.size(), 0);
  for (int64_t i = 0; i < ds.size(); ++i) {
    auto [img, msk] = make_batch<float>(ds, {i});
    Tensor<float> logits = model.forward(img);
    LabelMask pred = decode_mask(logits);
    const auto& s = ds.samples[static_cast<size_t>(i)];
    CaseReport cr = evaluate_case(pred, msk, cls, s.spacing_y, s.spacing_x);
    for (size_t k = 0; k < cls.size(); ++k) {
      dsc_sum[k] += cr.per_class[k].dsc;
      if (cr.per_class[k].hd_defined) {
        hd_sum[k] += cr.per_class[k].hd95;
        ++hd_n[k];
      }
    }
  }

  double dsc_total = 0, hd_total = 0;
  for (size_t k = 0; k < cls.size(); ++k) {
    ClassMetrics cm;
    cm.cls = cls[k];
    cm.dsc = dsc_sum[k] / static_cast<double>(rep.cases);
    cm.hd_defined = hd_n[k] > 0;
    cm.hd95 = cm.hd_defined ? hd_sum[k] / static_cast<double>(hd_n[k]) : kHdUndefined;
    rep.per_class.push_back(cm);
    dsc_total += cm.dsc;
    if (cm.hd_defined) {
      hd_total += cm.hd95;
      ++rep.hd_defined_classes;
    }
  }
  rep.mean_dsc = dsc_total / static_cast<double>(cls.size());
  if (rep.hd_defined_classes > 0) rep.mean_hd95 = hd_total / static_cast<double>(rep.hd_defined_classes);
  return rep;
}

TrainResult train(const RunConfig& cfg, const Dataset& train_ds, const Dataset& val_ds,
                  const std::string& out_dir, const std::string& resume_path) {
  cfg.validate();
  if (train_ds.size() == 0) fail(ErrorKind::usage, "train: empty training dataset");
  if (val_ds.size() == 0) fail(ErrorKind::usage, "train: empty validation dataset");
  for (const Dataset* ds : {&train_ds, &val_ds}) {
    if (ds->num_classes != cfg.model.num_classes)
      fail_config("dataset split '" + ds->split + "' has " + std::to_string(ds->num_classes) +
                  " classes but the config says " + std::to_string(cfg.model.num_classes));
    if (ds->img_size != cfg.model.img_size)
      fail_config("dataset split '" + ds->split + "' is size " + std::to_string(ds->img_size) +
                  " but the config says " + std::to_string(cfg.model.img_size));
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory: " + out_dir);

  TrainResult res;
  res.best_path = out_dir + "/best.gckp";
  res.final_path = out_dir + "/final.gckp";
  res.log_path = out_dir + "/train.log";

  GCtxUNet<float> model(cfg.model);
  AdamW<float> opt(cfg.train);
  opt.attach(model.params);

  int64_t start_epoch = 0;
  double best = -1.0;
  uint64_t bad_epochs = 0;
  if (!resume_path.empty()) {
    Checkpoint ck = load_checkpoint(resume_path);
    // extending a finished run is legal, so max_epochs may differ; everything
    // else must match for the continuation to be meaningful
    RunConfig stored = ck.config;
    stored.train.max_epochs = cfg.train.max_epochs;
    if (serialize_config(stored) != serialize_config(cfg))
      fail_config("resume checkpoint was written with a different configuration: " + resume_path);
    apply_checkpoint(ck, model.params);
    if (!ck.opt) fail(ErrorKind::integrity, "resume checkpoint lacks optimizer state: " + resume_path);
    opt.t = static_cast<int64_t>(ck.opt->step);
    opt.m = ck.opt->m;
    opt.v = ck.opt->v;
    start_epoch = static_cast<int64_t>(ck.opt->epoch);
    best = ck.opt->best_metric;
    bad_epochs = ck.opt->bad_epochs;
  }

  std::ofstream log(res.log_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (!log) fail(ErrorKind::io, "cannot open training log: " + res.log_path);

  auto snapshot = [&](uint64_t epochs_done) {
    OptSnapshot s;
    s.step = static_cast<uint64_t>(opt.t);
    s.epoch = epochs_done;
    s.best_metric = best;
    s.bad_epochs = bad_epochs;
    s.m = opt.m;
    s.v = opt.v;
    return s;
  };

  bool wrote_final = false;
  res.epochs_completed = start_epoch;
  Rng root(cfg.train.seed);
  for (int64_t e = start_epoch; e < cfg.train.max_epochs; ++e) {
    Rng erng = root.split("epoch", static_cast<uint64_t>(e));
    Rng shuffle_rng = erng.split("shuffle");
    Rng aug_rng = erng.split("augment");
    auto t0 = std::chrono::steady_clock::now();

    auto batches = plan_batches(train_ds.size(), cfg.train.batch_size, true, shuffle_rng);
    double lsum = 0;
    bool finite = true;
    for (const auto& idx : batches) {
      auto [img, msk] = make_batch<float>(train_ds, idx, cfg.train.augment ? &aug_rng : nullptr);
      TapeScope<float> scope;
      Tensor<float> logits = model.forward(img);
      Tensor<float> loss = combined_loss(logits, msk, cfg.train.loss);
      double lval = static_cast<double>(loss.item());
      if (!std::isfinite(lval)) {
        finite = false;
        break;
      }
      lsum += lval;
      model.params.zero_grad();
      try {
        backward(loss);
        opt.step(model.params);
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::numeric) throw;
        finite = false;
        break;
      }
    }
    if (!finite) {
      res.diverged = true;
      log << "diverged epoch=" << e << "\n";
      // parameters were not touched by the failing step; keep the newest good
      // state on disk if nothing was written yet
      if (!wrote_final) save_checkpoint(res.final_path, cfg, model.params, nullptr);
      break;
    }

    EpochRecord rec;
    rec.epoch = e;
    rec.steps = opt.t;
    rec.mean_loss = lsum / static_cast<double>(batches.size());

    if ((e + 1) % cfg.train.eval_every == 0) {
      EvalReport ev = evaluate(model, val_ds);
      rec.evaluated = true;
      rec.val_dsc = ev.mean_dsc;
      if (ev.mean_dsc > best) {
        best = ev.mean_dsc;
        bad_epochs = 0;
        auto s = snapshot(static_cast<uint64_t>(e + 1));
        save_checkpoint(res.best_path, cfg, model.params, &s);
      } else {
        ++bad_epochs;
      }
    }

    auto s = snapshot(static_cast<uint64_t>(e + 1));
    save_checkpoint(res.final_path, cfg, model.params, &s);
    wrote_final = true;
    res.epochs_completed = e + 1;
    res.log.push_back(rec);

    int64_t wall_ms = 0;
    if (!Runtime::deterministic())
      wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    log << fmt_line("epoch=%lld steps=%lld loss=%.8f val_dsc=", static_cast<long long>(rec.epoch),
                    static_cast<long long>(rec.steps), rec.mean_loss);
    if (rec.evaluated)
      log << fmt_line("%.6f", rec.val_dsc);
    else
      log << "-";
    log << fmt_line(" lr=%g wall_ms=%lld\n", cfg.train.learning_rate,
                    static_cast<long long>(wall_ms));
    log.flush();

    if (rec.evaluated && bad_epochs >= static_cast<uint64_t>(cfg.train.patience)) {
      res.early_stopped = true;
      log << "early_stop epoch=" << e << " best=" << best << "\n";
      break;
    }
  }

  res.best_metric = best;
  // a run that never evaluated (or diverged before improving) still leaves a
  // usable best checkpoint behind
  if (!std::filesystem::exists(res.best_path) && std::filesystem::exists(res.final_path))
    std::filesystem::copy_file(res.final_path, res.best_path,
                               std::filesystem::copy_options::overwrite_existing);
  return res;
}

}  // namespace gcunet
