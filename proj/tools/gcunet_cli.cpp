#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "gcunet/gradcheck_suite.hpp"
#include "gcunet/trainer.hpp"

using namespace gcunet;
namespace fs = std::filesystem;

namespace {

// fixed overlay palette, one color per foreground class (wraps past 8)
constexpr uint8_t kPalette[8][3] = {
    {230, 25, 75}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200},
    {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {240, 50, 230},
};

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : parse_config_file(path);
  std::vector<std::string> errs;
  for (const auto& kv : sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      errs.push_back("--set expects key=value, got '" + kv + "'");
      continue;
    }
    try {
      apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    } catch (const Error& e) {
      errs.push_back(e.what());
    }
  }
  if (!errs.empty()) {
    std::string all = "configuration errors:";
    for (const auto& e : errs) all += "\n  - " + e;
    fail_config(all);
  }
  return cfg;
}

// model rebuilt exactly as the checkpoint recorded it
GCtxUNet<float> model_from(const Checkpoint& ck) {
  GCtxUNet<float> model(ck.config.model);
  apply_checkpoint(ck, model.params);
  return model;
}

nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j;
  j["cases"] = r.cases;
  j["mean_dsc"] = r.mean_dsc;
  j["hd_defined_classes"] = r.hd_defined_classes;
  if (r.hd_defined_classes > 0) j["mean_hd95"] = r.mean_hd95;
  j["classes"] = nlohmann::json::array();
  for (const auto& c : r.per_class) {
    nlohmann::json cj;
    cj["class"] = c.cls;
    cj["dsc"] = c.dsc;
    cj["hd_defined"] = c.hd_defined;
    if (c.hd_defined) cj["hd95"] = c.hd95;
    j["classes"].push_back(cj);
  }
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot write: " + path);
  f << text;
  if (!f) fail(ErrorKind::io, "short write: " + path);
}

int cmd_gen(const std::string& out, int64_t n, int64_t size, int64_t classes, uint64_t seed) {
  Dataset ds = generate_synthetic(n, size, classes, seed);
  std::string manifest = save_dataset(ds, out);
  std::printf("wrote %lld samples (%lldx%lld, %lld classes) under %s\n",
              static_cast<long long>(n), static_cast<long long>(size),
              static_cast<long long>(size), static_cast<long long>(classes), out.c_str());
  std::printf("manifest: %s\n", manifest.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& data, const std::string& val_data, const std::string& out,
              const std::string& resume) {
  RunConfig cfg = load_run_config(config_path, sets);
  cfg.validate();
  Dataset train_ds = load_dataset(data);
  Dataset val_ds = val_data.empty() ? train_ds : load_dataset(val_data);
  if (val_data.empty())
    std::printf("no --val manifest given; validating on the training split\n");

  TrainResult r = train(cfg, train_ds, val_ds, out, resume);
  for (const auto& rec : r.log) {
    std::printf("epoch=%lld steps=%lld loss=%.6f", static_cast<long long>(rec.epoch),
                static_cast<long long>(rec.steps), rec.mean_loss);
    if (rec.evaluated) std::printf(" val_dsc=%.4f", rec.val_dsc);
    std::printf("\n");
  }
  if (r.diverged) {
    std::fprintf(stderr, "error: training diverged (non-finite loss); last good checkpoint: %s\n",
                 r.final_path.c_str());
    return 2;
  }
  std::printf("%s after %lld epochs, best val_dsc=%.4f\n",
              r.early_stopped ? "early-stopped" : "finished",
              static_cast<long long>(r.epochs_completed), r.best_metric);
  std::printf("best: %s\nfinal: %s\nlog: %s\n", r.best_path.c_str(), r.final_path.c_str(),
              r.log_path.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out) {
  Checkpoint ck = load_checkpoint(ckpt);
  GCtxUNet<float> model = model_from(ck);
  Dataset ds = load_dataset(data);
  EvalReport rep = evaluate(model, ds);

  std::string text = rep.to_text();
  std::fputs(text.c_str(), stdout);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory: " + out);
  write_text(out + "/metrics.txt", text);
  write_text(out + "/metrics.json", report_json(rep).dump(2) + "\n");
  std::printf("reports: %s/metrics.txt, %s/metrics.json\n", out.c_str(), out.c_str());
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& image_path, const std::string& out,
                bool overlay, bool resize) {
  Checkpoint ck = load_checkpoint(ckpt);
  GCtxUNet<float> model = model_from(ck);
  int64_t S = model.cfg.img_size;

  Tensor<float> img = read_nseg_image(image_path);
  int64_t H = img.dim(1), W = img.dim(2);
  Tensor<float> batch = reshape(img, {1, img.dim(0), H, W});
  if (H != S || W != S) {
    if (!resize)
      fail_shape("input is " + std::to_string(H) + "x" + std::to_string(W) +
                 " but the model expects " + std::to_string(S) + "x" + std::to_string(S) +
                 "; pass --resize to interpolate");
    batch = bilinear_resize(batch, S, S);
  }

  LabelMask mask = decode_mask(model.forward(batch));
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory: " + out);

  std::vector<uint8_t> labels(mask.v.size());
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<uint8_t>(mask.v[i]);
  std::string mask_path = out + "/mask.nseg";
  write_nseg(mask_path, Shape{S, S}, labels.data());
  std::printf("mask: %s\n", mask_path.c_str());

  if (overlay) {
    std::string ppm = "P6\n" + std::to_string(S) + " " + std::to_string(S) + "\n255\n";
    const float* p = batch.data();
    int64_t plane = S * S;
    for (int64_t i = 0; i < plane; ++i) {
      int32_t lab = mask.v[static_cast<size_t>(i)];
      for (int64_t c = 0; c < 3; ++c) {
        double gray = 255.0 * std::min(1.0f, std::max(0.0f, p[c * plane + i]));
        double val = lab == 0 ? gray : 0.5 * gray + 0.5 * kPalette[(lab - 1) % 8][c];
        ppm.push_back(static_cast<char>(static_cast<int>(val + 0.5)));
      }
    }
    std::string ppm_path = out + "/overlay.ppm";
    write_text(ppm_path, ppm);
    std::printf("overlay: %s\n", ppm_path.c_str());
  }
  return 0;
}

bool default_architecture(const ModelConfig& m) {
  ModelConfig d;
  return m.img_size == d.img_size && m.in_channels == d.in_channels &&
         m.num_classes == d.num_classes && m.embed_dim == d.embed_dim && m.depths == d.depths &&
         m.heads == d.heads && m.windows == d.windows && m.mlp_ratio == d.mlp_ratio &&
         m.se_reduction == d.se_reduction && m.upsample == d.upsample;
}

int cmd_profile(const std::string& config_path, const std::vector<std::string>& sets,
                int64_t batch) {
  RunConfig cfg = load_run_config(config_path, sets);
  cfg.model.validate();
  GCtxUNet<float> model(cfg.model);
  Profile p = profile_model(model, batch);
  double ckpt_mb = 4.0 * static_cast<double>(p.params) / 1e6;

  std::printf("params            %lld (%.2fM)\n", static_cast<long long>(p.params),
              static_cast<double>(p.params) / 1e6);
  std::printf("flops per forward %lld (%.2fG)\n", static_cast<long long>(p.flops_per_image),
              static_cast<double>(p.flops_per_image) / 1e9);
  std::printf("flops per batch   %lld (%.2fG, batch %lld)\n",
              static_cast<long long>(p.flops_per_batch),
              static_cast<double>(p.flops_per_batch) / 1e9, static_cast<long long>(batch));
  std::printf("checkpoint size   %.2fMB (32-bit weights)\n", ckpt_mb);
  if (default_architecture(cfg.model)) {
    std::printf("reference         12.34M params / 30.41G flops (batch 10) / 49.75MB\n");
    std::printf("delta             params %+.1f%%, batch flops %+.1f%%, size %+.1f%%\n",
                100.0 * (static_cast<double>(p.params) / 12.34e6 - 1.0),
                100.0 * (static_cast<double>(p.flops_per_batch) / 30.41e9 - 1.0),
                100.0 * (ckpt_mb / 49.75 - 1.0));
    std::printf("note              batch-flops reference semantics are ambiguous "
                "(per forward of a 10-image batch vs per epoch); both numbers above "
                "are reported, neither is force-matched\n");
  }
  return 0;
}

int cmd_gradcheck(const std::string& scale, const std::string& corrupt) {
  if (!corrupt.empty()) {
    GradCorruption::op() = corrupt;
    std::printf("corrupting backward of '%s' by %.2fx (negative control)\n", corrupt.c_str(),
                GradCorruption::scale());
  }
  CheckReport rep = run_gradcheck(scale);
  GradCorruption::op().clear();
  rep.print();
  bool pass = rep.all_below(kGradTol);
  std::printf("gradcheck %s: %s (worst %.3e, tol %.0e, %zu checks)\n", scale.c_str(),
              pass ? "PASS" : "FAIL", rep.worst(), kGradTol, rep.items.size());
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("GCUNET_DETERMINISTIC")) {
    std::string v = env;
    Runtime::deterministic() = !(v == "0" || v == "false");
  }

  CLI::App app{"GC-ViT U-shaped segmentation workbench"};
  app.require_subcommand(1);

  std::string out, config_path, data, val_data, resume, ckpt, image_path, scale = "ops", corrupt;
  std::vector<std::string> sets;
  int64_t n = 8, size = 64, classes = 3, batch = 10;
  uint64_t seed = 0;
  bool overlay = false, resize = false;

  auto* gen = app.add_subcommand("gen", "generate a synthetic labeled dataset");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--n", n, "number of samples");
  gen->add_option("--size", size, "image side length");
  gen->add_option("--classes", classes, "number of classes incl. background");
  gen->add_option("--seed", seed, "generator seed");

  auto* train = app.add_subcommand("train", "fit the model on a dataset");
  train->add_option("--config", config_path, "key=value config file");
  train->add_option("--set", sets, "override a config key (key=value, repeatable)");
  train->add_option("--data", data, "training manifest")->required();
  train->add_option("--val", val_data, "validation manifest (defaults to --data)");
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  eval->add_option("--data", data, "evaluation manifest")->required();
  eval->add_option("--out", out, "report directory")->required();

  auto* predict = app.add_subcommand("predict", "segment one image");
  predict->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  predict->add_option("--image", image_path, "input image tensor (.nseg)")->required();
  predict->add_option("--out", out, "output directory")->required();
  predict->add_flag("--overlay", overlay, "also write a color overlay (.ppm)");
  predict->add_flag("--resize", resize, "interpolate input to the model size");

  auto* profile = app.add_subcommand("profile", "parameter and FLOP accounting");
  profile->add_option("--config", config_path, "key=value config file");
  profile->add_option("--set", sets, "override a config key (key=value, repeatable)");
  profile->add_option("--batch", batch, "batch size for per-batch FLOPs");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gradcheck->add_option("--scale", scale, "ops, block or model")
      ->check(CLI::IsMember({"ops", "block", "model"}));
  gradcheck->add_option("--corrupt", corrupt, "scale gradients of this op (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(out, n, size, classes, seed);
    if (train->parsed()) return cmd_train(config_path, sets, data, val_data, out, resume);
    if (eval->parsed()) return cmd_eval(ckpt, data, out);
    if (predict->parsed()) return cmd_predict(ckpt, image_path, out, overlay, resize);
    if (profile->parsed()) return cmd_profile(config_path, sets, batch);
    if (gradcheck->parsed()) return cmd_gradcheck(scale, corrupt);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
