#pragma once

// End-to-end training: paired data (fixed-reference directory or synthetic
// gamma/EV degradations), Adam with a constant-then-linear-decay schedule,
// EMA teacher and queue upkeep, per-epoch checkpoints and a CSV loss log.
//
// Every sample is a pure function of (seed, epoch, slot), so a run can be
// resumed from a checkpoint without any RNG state.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "expx/checkpoint.hpp"
#include "expx/image.hpp"
#include "expx/losses.hpp"
#include "expx/pipeline.hpp"
#include "json.hpp"

namespace expx {

struct SynthPairSpec {
  double gamma_min = 0.3;
  double gamma_max = 3.0;
  double ev_min = -2.0;
  double ev_max = 2.0;

  void validate() const;
};

struct TrainConfig {
  double lr = 2e-4;
  int epochs_const = 100;
  int epochs_decay = 100;
  int batch = 32;
  int image_size = 512;
  std::uint64_t seed = 7;
  LossWeights weights;
  ContrastiveConfig contrastive;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // Data: a directory of inputs paired with reference_path, or synthetic
  // pairs built from a procedural pool of synth_pool base images. In
  // synthetic mode a non-empty reference_path replaces the base image as I_r.
  bool synthetic = false;
  std::string data_dir;
  std::string reference_path;
  SynthPairSpec synth;
  int synth_pool = 64;

  // Stop after this many steps (0 = the full epoch schedule).
  std::int64_t max_steps = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

// Learning rate for a 0-based epoch; throws ConfigError outside the schedule.
double lr_schedule(int epoch, const TrainConfig& cfg);

struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::int64_t t = 0;
};

struct AdamHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Bias-corrected Adam over `params` (all trainable). Parameters without a
// gradient buffer are treated as having zero gradient. If any gradient is
// non-finite nothing is changed and false is returned.
bool adam_step(const std::vector<Tensor<float>>& params, AdamState& state, double lr,
               const AdamHyper& hyper = {});

struct Pair {
  Image source;
  Image reference;
};

// clamp(base^gamma * 2^ev, 0, 1)
Image degrade(const Image& base, double gamma, double ev);

// A smooth, well-exposed procedural scene: shaded background, a few soft
// shapes and some texture.
Image synth_base_image(std::int64_t size, std::uint64_t seed);

// Held-out pairs drawn with a seed disjoint from the training pool.
std::vector<Pair> synthetic_holdout(std::size_t count, std::int64_t size, std::uint64_t seed,
                                    const SynthPairSpec& spec = {});

class PairSource {
 public:
  static PairSource synthetic(const TrainConfig& cfg);
  // Throws IoError when no input could be read; unreadable files are counted.
  static PairSource directory(const std::filesystem::path& dir,
                              const std::filesystem::path& reference, std::int64_t size,
                              std::uint64_t seed);

  std::size_t size() const { return pool_.size(); }
  int skipped_files() const { return skipped_; }

  // The slot-th pair of an epoch, after that epoch's shuffle.
  Pair sample(std::int64_t epoch, std::size_t slot) const;
  std::vector<Pair> epoch_pairs(std::int64_t epoch) const;
  std::vector<std::size_t> permutation(std::int64_t epoch) const;

 private:
  bool synthetic_ = false;
  std::uint64_t seed_ = 0;
  SynthPairSpec spec_;
  std::vector<Image> pool_;
  std::optional<Image> reference_;
  int skipped_ = 0;
};

struct StepLog {
  std::int64_t step = 0;  // 1-based
  int epoch = 0;
  double lr = 0;
  double pix = 0, dc = 0, ctr = 0, total = 0;
  int skipped_anchors = 0;
  bool applied = true;  // false when the NaN guard dropped the update
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);
  // Resume from the records of a checkpoint written by save().
  Trainer(TrainConfig cfg, const std::vector<Record>& checkpoint);

  StepLog step();

  std::int64_t steps_done() const { return steps_done_; }
  std::int64_t steps_per_epoch() const;
  std::int64_t total_steps() const;
  int epoch_of(std::int64_t step_index) const;

  std::vector<Record> checkpoint_records() const;
  void save(const std::filesystem::path& path) const;

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  ContrastiveState<float>& contrastive() { return ctr_; }
  const PairSource& data() const { return data_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor<float>> trainable() const;

  TrainConfig cfg_;
  PairSource data_;
  Model model_;
  ContrastiveState<float> ctr_;
  AdamState adam_;
  std::int64_t steps_done_ = 0;
};

inline constexpr const char* kLossLogHeader = "step,L_pix,L_dc,L_ctr,total,skipped_anchors";

struct TrainOptions {
  std::filesystem::path out;               // checkpoint, rewritten every epoch
  std::filesystem::path log_csv;           // optional
  std::filesystem::path resume;            // optional checkpoint to continue from
  std::function<void(const StepLog&)> on_step;
};

// Runs to cfg.max_steps (or the full schedule) and returns the checkpoint path.
std::filesystem::path train(const TrainConfig& cfg, const TrainOptions& opts);

}  // namespace expx
