#include "expx/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "expx/photometric.hpp"

namespace expx {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(a) ^ b) ^ c);
}

// Stream tags so the pool, shuffles and degradations never share a seed.
constexpr std::uint64_t kPoolStream = 1, kShuffleStream = 2, kDegradeStream = 3;

std::pair<double, double> sample_degradation(const SynthPairSpec& spec, Rng& rng) {
  const double gamma = std::exp(uniform(rng, std::log(spec.gamma_min), std::log(spec.gamma_max)));
  const double ev = uniform(rng, spec.ev_min, spec.ev_max);
  return {gamma, ev};
}

const std::vector<Image>& check_pool(const std::vector<Image>& pool) {
  if (pool.empty()) throw ConfigError("pair source: no images");
  return pool;
}

}  // namespace

void SynthPairSpec::validate() const {
  if (!(gamma_min > 0 && gamma_min <= gamma_max))
    throw ConfigError("synth: gamma range must be positive and nonempty");
  if (!(ev_min <= ev_max)) throw ConfigError("synth: EV range must be nonempty");
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train: lr must be > 0");
  if (batch < 2) throw ConfigError("train: batch must be >= 2 (contrastive pairs)");
  if (epochs_const < 0 || epochs_decay < 0 || epochs_const + epochs_decay < 1)
    throw ConfigError("train: the epoch schedule is empty");
  if (image_size < 16) throw ConfigError("train: image_size must be >= 16");
  if (weights.lambda_dc < 0 || weights.lambda_ctr < 0)
    throw ConfigError("train: loss weights must be nonnegative");
  if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  if (synth_pool < 1) throw ConfigError("train: synth_pool must be >= 1");
  if (!synthetic && data_dir.empty())
    throw ConfigError("train: need a data directory or synthetic mode");
  if (!synthetic && reference_path.empty())
    throw ConfigError("train: directory mode needs a reference image");
  contrastive.validate();
  synth.validate();
}

nlohmann::ordered_json TrainConfig::to_json() const {
  const EncoderConfig enc;
  const ModNetConfig net;
  nlohmann::ordered_json j;
  j["lr"] = lr;
  j["epochs_const"] = epochs_const;
  j["epochs_decay"] = epochs_decay;
  j["batch"] = batch;
  j["image_size"] = image_size;
  j["seed"] = seed;
  j["lambda_dc"] = weights.lambda_dc;
  j["lambda_ctr"] = weights.lambda_ctr;
  j["tau"] = contrastive.tau;
  j["percentile"] = contrastive.percentile;
  j["momentum"] = contrastive.momentum;
  j["queue_capacity"] = contrastive.queue_capacity;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["adam_eps"] = adam_eps;
  j["tau_under"] = kTauUnder;
  j["tau_over"] = kTauOver;
  j["dark_channel_window"] = kDarkChannelWindow;
  j["descriptor_width"] = enc.descriptor;
  j["modnet_channels"] = net.channels;
  j["synthetic"] = synthetic;
  j["data_dir"] = data_dir;
  j["reference_path"] = reference_path;
  j["synth_gamma"] = {synth.gamma_min, synth.gamma_max};
  j["synth_ev"] = {synth.ev_min, synth.ev_max};
  j["synth_pool"] = synth_pool;
  j["max_steps"] = max_steps;
  return j;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  const int total = cfg.epochs_const + cfg.epochs_decay;
  if (epoch < 0 || epoch >= total)
    throw ConfigError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(total) + ")");
  if (epoch < cfg.epochs_const) return cfg.lr;
  return cfg.lr * (1.0 - static_cast<double>(epoch - cfg.epochs_const + 1) / cfg.epochs_decay);
}

bool adam_step(const std::vector<Tensor<float>>& params, AdamState& state, double lr,
               const AdamHyper& hyper) {
  for (const auto& p : params)
    for (float g : p.grad())
      if (!std::isfinite(g)) return false;
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.data().size(), 0.0f);
      state.v.emplace_back(p.data().size(), 0.0f);
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam: state holds " + std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  ++state.t;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<float> p = params[k];
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != w.size()) throw ShapeError("adam: moment size mismatch at tensor " + std::to_string(k));
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = static_cast<float>(hyper.beta1 * m[i] + (1 - hyper.beta1) * gi);
      v[i] = static_cast<float>(hyper.beta2 * v[i] + (1 - hyper.beta2) * gi * gi);
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mh / (std::sqrt(vh) + hyper.eps));
    }
  }
  return true;
}

Image degrade(const Image& base, double gamma, double ev) {
  Image out = base;
  const double gain = std::exp2(ev);
  for (auto& v : out.pixels)
    v = static_cast<float>(std::clamp(std::pow(static_cast<double>(v), gamma) * gain, 0.0, 1.0));
  return out;
}

Image synth_base_image(std::int64_t size, std::uint64_t seed) {
  Rng rng(seed);
  Image img(size, size);
  const double s = static_cast<double>(size);
  // Bilinear blend of four corner colours.
  double corner[4][3];
  for (auto& c : corner)
    for (auto& v : c) v = uniform(rng, 0.2, 0.8);
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x) {
      const double u = x / (s - 1), t = y / (s - 1);
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(
            (1 - t) * ((1 - u) * corner[0][c] + u * corner[1][c]) +
            t * ((1 - u) * corner[2][c] + u * corner[3][c]));
    }
  // Soft-edged ellipses and rectangles.
  const int shapes = 3 + static_cast<int>(rng() % 4);
  for (int k = 0; k < shapes; ++k) {
    const bool ellipse = rng() % 2 == 0;
    const double cx = uniform(rng, 0, s), cy = uniform(rng, 0, s);
    const double rx = uniform(rng, 0.08, 0.3) * s, ry = uniform(rng, 0.08, 0.3) * s;
    const double soft = uniform(rng, 0.5, 3.0);
    double col[3];
    for (auto& v : col) v = uniform(rng, 0.1, 0.9);
    const double opacity = uniform(rng, 0.5, 1.0);
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        const double d = ellipse ? std::sqrt(dx * dx + dy * dy) : std::max(std::abs(dx), std::abs(dy));
        const double inside = 1.0 / (1.0 + std::exp((d - 1.0) * std::min(rx, ry) / soft));
        const double a = opacity * inside;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>((1 - a) * img.at(c, y, x) + a * col[c]);
      }
  }
  // Oriented sinusoidal texture plus a little noise.
  const double freq = uniform(rng, 0.05, 0.4), theta = uniform(rng, 0, 3.14159265358979);
  const double amp = uniform(rng, 0.02, 0.08);
  for (std::int64_t y = 0; y < size; ++y)
    for (std::int64_t x = 0; x < size; ++x) {
      const double tex = amp * std::sin(freq * (x * std::cos(theta) + y * std::sin(theta)));
      for (int c = 0; c < 3; ++c) {
        const double n = uniform(rng, -0.01, 0.01);
        img.at(c, y, x) = static_cast<float>(std::clamp(img.at(c, y, x) + tex + n, 0.02, 0.98));
      }
    }
  return img;
}

std::vector<Pair> synthetic_holdout(std::size_t count, std::int64_t size, std::uint64_t seed,
                                    const SynthPairSpec& spec) {
  spec.validate();
  std::vector<Pair> out;
  for (std::size_t i = 0; i < count; ++i) {
    Image base = synth_base_image(size, mix(seed, kPoolStream, i));
    Rng rng(mix(seed, kDegradeStream, i));
    const auto [gamma, ev] = sample_degradation(spec, rng);
    out.push_back({degrade(base, gamma, ev), std::move(base)});
  }
  return out;
}

PairSource PairSource::synthetic(const TrainConfig& cfg) {
  cfg.synth.validate();
  PairSource src;
  src.synthetic_ = true;
  src.seed_ = cfg.seed;
  src.spec_ = cfg.synth;
  for (int i = 0; i < cfg.synth_pool; ++i)
    src.pool_.push_back(synth_base_image(cfg.image_size, mix(cfg.seed, kPoolStream, i)));
  if (!cfg.reference_path.empty())
    src.reference_ = resize(load_image(cfg.reference_path), cfg.image_size, cfg.image_size);
  return src;
}

PairSource PairSource::directory(const std::filesystem::path& dir,
                                 const std::filesystem::path& reference, std::int64_t size,
                                 std::uint64_t seed) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  PairSource src;
  src.seed_ = seed;
  src.reference_ = resize(load_image(reference), size, size);
  for (const auto& f : files) {
    try {
      src.pool_.push_back(resize(load_image(f), size, size));
    } catch (const Error& e) {
      ++src.skipped_;
      std::cerr << "warning: skipping " << f.string() << ": " << e.what() << "\n";
    }
  }
  if (src.pool_.empty()) throw IoError("no readable images in " + dir.string());
  return src;
}

std::vector<std::size_t> PairSource::permutation(std::int64_t epoch) const {
  std::vector<std::size_t> perm(check_pool(pool_).size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(mix(seed_, kShuffleStream, static_cast<std::uint64_t>(epoch)));
  // Fisher-Yates with our own draw so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
  return perm;
}

Pair PairSource::sample(std::int64_t epoch, std::size_t slot) const {
  const auto perm = permutation(epoch);
  const std::size_t idx = perm[slot % perm.size()];
  if (!synthetic_) return {pool_[idx], *reference_};
  Rng rng(mix(seed_ ^ static_cast<std::uint64_t>(epoch) * 0x100000001b3ULL, kDegradeStream, slot));
  const auto [gamma, ev] = sample_degradation(spec_, rng);
  return {degrade(pool_[idx], gamma, ev), reference_ ? *reference_ : pool_[idx]};
}

std::vector<Pair> PairSource::epoch_pairs(std::int64_t epoch) const {
  std::vector<Pair> out;
  for (std::size_t i = 0; i < pool_.size(); ++i) out.push_back(sample(epoch, i));
  return out;
}

namespace {

PairSource make_source(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.synthetic) return PairSource::synthetic(cfg);
  return PairSource::directory(cfg.data_dir, cfg.reference_path, cfg.image_size, cfg.seed);
}

Model make_trainer_model(const TrainConfig& cfg) {
  Model m = make_model(cfg.seed, cfg.image_size);
  m.meta["lr"] = cfg.lr;
  m.meta["batch"] = cfg.batch;
  m.meta["epochs_const"] = cfg.epochs_const;
  m.meta["epochs_decay"] = cfg.epochs_decay;
  m.meta["lambda_dc"] = cfg.weights.lambda_dc;
  m.meta["lambda_ctr"] = cfg.weights.lambda_ctr;
  m.meta["tau"] = cfg.contrastive.tau;
  m.meta["percentile"] = cfg.contrastive.percentile;
  m.meta["momentum"] = cfg.contrastive.momentum;
  m.meta["queue_capacity"] = static_cast<double>(cfg.contrastive.queue_capacity);
  return m;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg)
    : cfg_(std::move(cfg)),
      data_(make_source(cfg_)),
      model_(make_trainer_model(cfg_)),
      ctr_(model_.caee, cfg_.contrastive) {}

Trainer::Trainer(TrainConfig cfg, const std::vector<Record>& ck) : Trainer(std::move(cfg)) {
  Model loaded = model_from_records(ck);
  model_.caee.params().assign_from(loaded.caee.params());
  model_.modnet.params().assign_from(loaded.modnet.params());
  load_params(ck, "teacher.", ctr_.teacher().params());
  steps_done_ = static_cast<std::int64_t>(scalar_value(ck, "state.step"));
  adam_.t = static_cast<std::int64_t>(scalar_value(ck, "state.adam_t"));
  if (adam_.t > 0) {
    auto load_moments = [&](const std::string& section, const ParamSet<float>& ps) {
      for (const auto& [name, t] : ps.entries()) {
        const Record* m = find_record(ck, "adam.m." + section + name);
        const Record* v = find_record(ck, "adam.v." + section + name);
        if (!m || !v || m->shape != t.shape() || v->shape != t.shape())
          throw FormatError("checkpoint: missing or malformed Adam moments for " + section + name);
        adam_.m.push_back(m->values);
        adam_.v.push_back(v->values);
      }
    };
    load_moments("caee.", model_.caee.params());
    load_moments("modnet.", model_.modnet.params());
  }
  if (const Record* q = find_record(ck, "state.queue")) {
    if (q->shape.size() != 2 || q->shape[1] != kDescriptorWidth)
      throw FormatError("checkpoint: state.queue has shape " + shape_str(q->shape));
    for (std::int64_t i = 0; i < q->shape[0]; ++i)
      ctr_.queue().emplace_back(q->values.begin() + i * kDescriptorWidth,
                                q->values.begin() + (i + 1) * kDescriptorWidth);
  }
}

std::int64_t Trainer::steps_per_epoch() const {
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(data_.size()) / cfg_.batch);
}

std::int64_t Trainer::total_steps() const {
  if (cfg_.max_steps > 0) return cfg_.max_steps;
  return steps_per_epoch() * (cfg_.epochs_const + cfg_.epochs_decay);
}

int Trainer::epoch_of(std::int64_t step_index) const {
  return static_cast<int>(step_index / steps_per_epoch());
}

std::vector<Tensor<float>> Trainer::trainable() const {
  std::vector<Tensor<float>> out;
  for (const auto& e : model_.caee.params().entries()) out.push_back(e.second);
  for (const auto& e : model_.modnet.params().entries()) out.push_back(e.second);
  return out;
}

StepLog Trainer::step() {
  const std::int64_t s = steps_done_;
  StepLog log;
  log.step = s + 1;
  log.epoch = epoch_of(s);
  const int last_epoch = cfg_.epochs_const + cfg_.epochs_decay - 1;
  log.lr = lr_schedule(std::min(log.epoch, last_epoch), cfg_);

  const auto b = static_cast<std::size_t>(cfg_.batch);
  const std::size_t first = static_cast<std::size_t>(s % steps_per_epoch()) * b;
  std::vector<Image> batch_images;  // sources, then references
  std::vector<Image> refs;
  for (std::size_t i = 0; i < b; ++i) {
    auto p = data_.sample(log.epoch, first + i);
    batch_images.push_back(std::move(p.source));
    refs.push_back(std::move(p.reference));
  }
  batch_images.insert(batch_images.end(), refs.begin(), refs.end());
  const auto both = to_tensor<float>(std::span<const Image>(batch_images));
  const auto n = static_cast<std::int64_t>(b);
  const auto x_s = ops::narrow(both, 0, 0, n);
  const auto x_r = ops::narrow(both, 0, n, n).detach();

  model_.caee.params().zero_grad();
  model_.modnet.params().zero_grad();

  const bool use_ctr = cfg_.weights.lambda_ctr > 0;
  Tensor<float> teacher_codes;
  try {
    const auto z = model_.caee.encode(both);
    const auto z_s = ops::narrow(z, 0, 0, n);
    const auto z_r = ops::narrow(z, 0, n, n);
    const auto out = model_.modnet.forward(x_s.detach(), delta_z(z_s, z_r));
    const auto pix = loss_pix(out.corrected, x_r);
    const auto dc = loss_dc(out.corrected, x_r);
    Tensor<float> ctr;
    if (use_ctr) {
      teacher_codes = ctr_.teacher_codes(x_s.detach());
      auto r = contrastive_loss(z_s, teacher_codes, ctr_.queue(), cfg_.contrastive);
      ctr = r.loss;
      log.skipped_anchors = r.skipped;
    }
    const auto total = total_loss(pix, dc, ctr, cfg_.weights);
    log.pix = pix.item();
    log.dc = dc.item();
    log.ctr = ctr.defined() ? ctr.item() : 0.0;
    log.total = total.item();
    total.backward();
    log.applied = adam_step(trainable(), adam_, log.lr,
                            {cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps});
  } catch (const NumericError& e) {
    log.applied = false;
    std::cerr << "warning: step " << log.step << " skipped: " << e.what() << "\n";
  }
  if (!log.applied) std::cerr << "warning: step " << log.step << " produced no update\n";

  if (use_ctr && log.applied) {
    ctr_.ema_update(model_.caee);
    ctr_.enqueue(teacher_codes);
  }
  model_.caee.params().zero_grad();
  model_.modnet.params().zero_grad();
  ++steps_done_;
  return log;
}

std::vector<Record> Trainer::checkpoint_records() const {
  auto out = model_records(model_);
  append_params(out, "teacher.", ctr_.teacher().params());
  out.push_back(scalar_record("state.step", static_cast<double>(steps_done_)));
  out.push_back(scalar_record("state.adam_t", static_cast<double>(adam_.t)));
  if (adam_.t > 0) {
    std::size_t k = 0;
    auto add_moments = [&](const std::string& section, const ParamSet<float>& ps) {
      for (const auto& [name, t] : ps.entries()) {
        out.push_back({"adam.m." + section + name, t.shape(), adam_.m[k]});
        out.push_back({"adam.v." + section + name, t.shape(), adam_.v[k]});
        ++k;
      }
    };
    add_moments("caee.", model_.caee.params());
    add_moments("modnet.", model_.modnet.params());
  }
  Record q{"state.queue", {static_cast<std::int64_t>(ctr_.queue().size()), kDescriptorWidth}, {}};
  for (const auto& row : ctr_.queue()) q.values.insert(q.values.end(), row.begin(), row.end());
  out.push_back(std::move(q));
  return out;
}

void Trainer::save(const std::filesystem::path& path) const { write_records(path, checkpoint_records()); }

std::filesystem::path train(const TrainConfig& cfg, const TrainOptions& opts) {
  if (opts.out.empty()) throw ConfigError("train: no output path");
  Trainer trainer = opts.resume.empty() ? Trainer(cfg) : Trainer(cfg, read_records(opts.resume));
  std::ofstream log;
  if (!opts.log_csv.empty()) {
    const bool append = !opts.resume.empty() && std::filesystem::exists(opts.log_csv);
    log.open(opts.log_csv, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + opts.log_csv.string());
    if (!append) log << kLossLogHeader << "\n";
    log.precision(9);
  }
  const auto total = trainer.total_steps();
  while (trainer.steps_done() < total) {
    const auto rec = trainer.step();
    if (log.is_open())
      log << rec.step << "," << rec.pix << "," << rec.dc << "," << rec.ctr << "," << rec.total
          << "," << rec.skipped_anchors << "\n";
    if (opts.on_step) opts.on_step(rec);
    if (trainer.steps_done() % trainer.steps_per_epoch() == 0) trainer.save(opts.out);
  }
  trainer.save(opts.out);
  return opts.out;
}

}  // namespace expx
