#include "expx/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <vector>

#include "expx/kernels.hpp"
#include "expx/metrics.hpp"
#include "expx/photometric.hpp"
#include "expx/pipeline.hpp"
#include "expx/trainer.hpp"

namespace expx {
namespace {

namespace fs = std::filesystem;

struct UsageError : Error {
  using Error::Error;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

bool is_image_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".png" || ext == ".ppm" || ext == ".PNG" || ext == ".PPM";
}

int run_eval(const fs::path& pred_dir, const fs::path& gt_dir, std::ostream& out) {
  if (!fs::is_directory(pred_dir)) throw IoError("not a directory: " + pred_dir.string());
  if (!fs::is_directory(gt_dir)) throw IoError("not a directory: " + gt_dir.string());
  std::map<std::string, fs::path> preds;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.is_regular_file() && is_image_file(e.path())) preds[e.path().filename().string()] = e.path();
  if (preds.empty()) throw IoError("no images in " + pred_dir.string());
  out << "filename,psnr_db,ssim\n";
  double psnr_sum = 0, ssim_sum = 0;
  for (const auto& [name, path] : preds) {
    const auto gt = gt_dir / name;
    if (!fs::exists(gt)) throw IoError("no ground truth for " + name + " in " + gt_dir.string());
    const auto r = compare(load_image(path), load_image(gt));
    psnr_sum += r.psnr;
    ssim_sum += r.ssim;
    out << name << "," << format_metric(r.psnr) << "," << format_metric(r.ssim) << "\n";
  }
  const double n = static_cast<double>(preds.size());
  out << "mean," << format_metric(psnr_sum / n) << "," << format_metric(ssim_sum / n) << "\n";
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reference-guided exposure transfer"};
  app.require_subcommand(1);
  bool serial = false;
  app.add_flag("--serial", serial, "Use the single-threaded reference kernels");

  std::string image, ckpt, source, reference, out_path, pred_dir, gt_dir, a_path, b_path;

  auto* encode = app.add_subcommand("encode", "Print the 66-d descriptor of an image");
  encode->add_option("--image", image)->required();
  encode->add_option("--ckpt", ckpt)->required();

  auto* stats = app.add_subcommand("stats", "Print luminance statistics as JSON");
  stats->add_option("--image", image)->required();

  auto* correct_cmd = app.add_subcommand("correct", "Re-expose a source to match a reference");
  correct_cmd->add_option("--source", source)->required();
  correct_cmd->add_option("--reference", reference)->required();
  correct_cmd->add_option("--ckpt", ckpt)->required();
  correct_cmd->add_option("--out", out_path)->required();

  TrainConfig tc;
  tc.image_size = 64;
  tc.batch = 4;
  std::int64_t steps = 200;
  std::string data_dir, ref_path, log_path, resume_path;
  bool synth = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  auto* data_opt = train_cmd->add_option("--data", data_dir, "Directory of training inputs");
  auto* synth_opt = train_cmd->add_flag("--synth", synth, "Synthetic gamma/EV pairs");
  data_opt->excludes(synth_opt);
  train_cmd->add_option("--ref", ref_path, "Fixed reference image");
  train_cmd->add_option("--out", out_path)->required();
  train_cmd->add_option("--size", tc.image_size)->capture_default_str();
  train_cmd->add_option("--batch", tc.batch)->capture_default_str();
  train_cmd->add_option("--steps", steps, "0 writes the initial checkpoint")->capture_default_str();
  train_cmd->add_option("--seed", tc.seed)->capture_default_str();
  train_cmd->add_option("--lr", tc.lr)->capture_default_str();
  train_cmd->add_option("--epochs-const", tc.epochs_const)->capture_default_str();
  train_cmd->add_option("--epochs-decay", tc.epochs_decay)->capture_default_str();
  train_cmd->add_option("--lambda-dc", tc.weights.lambda_dc)->capture_default_str();
  train_cmd->add_option("--lambda-ctr", tc.weights.lambda_ctr)->capture_default_str();
  train_cmd->add_option("--synth-pool", tc.synth_pool)->capture_default_str();
  train_cmd->add_option("--log", log_path, "Loss CSV (default: <out>.csv)");
  train_cmd->add_option("--resume", resume_path, "Continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of predictions against ground truth");
  eval->add_option("--pred", pred_dir)->required();
  eval->add_option("--gt", gt_dir)->required();

  auto* pair = app.add_subcommand("pair-metrics", "PSNR/SSIM of two images");
  pair->add_option("--a", a_path)->required();
  pair->add_option("--b", b_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  kernels::ModeGuard mode(serial ? kernels::Mode::Serial : kernels::Mode::Parallel);
  try {
    if (*encode) {
      const auto z = encode_image(load_model(ckpt), load_image(image));
      for (std::size_t i = 0; i < z.size(); ++i) out << (i ? "," : "") << fmt(z[i]);
      out << "\n";
    } else if (*stats) {
      out << to_json(stat_vector(to_gray(load_image(image)))) << "\n";
    } else if (*correct_cmd) {
      save_image(out_path, correct(load_model(ckpt), load_image(source), load_image(reference)));
    } else if (*train_cmd) {
      if (data_dir.empty() && !synth) throw UsageError("train: one of --data or --synth is required");
      if (steps < 0) throw UsageError("train: --steps must be >= 0");
      tc.synthetic = synth;
      tc.data_dir = data_dir;
      tc.reference_path = ref_path;
      tc.max_steps = steps;
      if (steps == 0) {
        tc.validate();
        Trainer(tc).save(out_path);
      } else {
        TrainOptions opts;
        opts.out = out_path;
        opts.log_csv = log_path.empty() ? fs::path(out_path + ".csv") : fs::path(log_path);
        opts.resume = resume_path;
        opts.on_step = [&](const StepLog& s) {
          if (s.step % 10 == 0)
            err << "step " << s.step << " L_pix " << fmt(s.pix) << " total " << fmt(s.total) << "\n";
        };
        train(tc, opts);
      }
      out << out_path << "\n";
    } else if (*eval) {
      return run_eval(pred_dir, gt_dir, out);
    } else if (*pair) {
      const auto r = compare(load_image(a_path), load_image(b_path));
      out << "psnr_db,ssim\n" << format_metric(r.psnr) << "," << format_metric(r.ssim) << "\n";
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace expx
