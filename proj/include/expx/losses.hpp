#pragma once

// Training objectives: L1 to the reference, L1 between dark channels, and
// a multi-positive NT-Xent on descriptors whose positives are mined in the
// space of an EMA teacher encoder plus a FIFO queue of past teacher codes.

#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "expx/caee.hpp"
#include "expx/photometric.hpp"
#include "expx/tensor.hpp"

namespace expx {

struct LossWeights {
  double lambda_dc = 0.5;
  double lambda_ctr = 0.1;
};

struct ContrastiveConfig {
  double tau = 0.07;
  double percentile = 10.0;  // nearest-rank, in percent
  double momentum = 0.99;
  std::size_t queue_capacity = 1024;
  double norm_eps = 1e-12;

  void validate() const;
};

// Mean absolute difference over all values.
template <typename T>
Tensor<T> loss_pix(const Tensor<T>& pred, const Tensor<T>& ref);

// Mean absolute difference of the two dark channels.
template <typename T>
Tensor<T> loss_dc(const Tensor<T>& pred, const Tensor<T>& ref,
                  std::int64_t window = kDarkChannelWindow);

template <typename T>
struct ContrastiveResult {
  Tensor<T> loss;            // scalar
  int anchors = 0;           // batch size
  int skipped = 0;           // anchors with an empty positive set
  bool degenerate = false;   // batch < 2; loss is 0
};

// Per-anchor nearest-rank percentile of distances; ties at the threshold
// count as positives.
double nearest_rank_percentile(std::vector<double> values, double percent);

// student [B,D] (graph), teacher [B,D] (constant, unnormalized or not),
// queue entries are unit-norm teacher codes. The anchor's own teacher code
// is excluded from its candidates. delta_override replaces every
// per-anchor threshold when set.
template <typename T>
ContrastiveResult<T> contrastive_loss(const Tensor<T>& student, const Tensor<T>& teacher,
                                      const std::deque<std::vector<T>>& queue,
                                      const ContrastiveConfig& cfg,
                                      std::optional<double> delta_override = std::nullopt);

// θ_t <- m θ_t + (1 - m) θ_s
template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double momentum);

template <typename T>
class ContrastiveState {
 public:
  ContrastiveState(const Encoder<T>& student, const ContrastiveConfig& cfg);

  // Unit-norm teacher descriptors [B,D], computed without a graph.
  Tensor<T> teacher_codes(const Tensor<T>& images) const;

  // Evaluates the loss for a batch and then enqueues the batch's teacher codes.
  ContrastiveResult<T> step_loss(const Tensor<T>& student_z, const Tensor<T>& images,
                                 std::optional<double> delta_override = std::nullopt);

  void enqueue(const Tensor<T>& unit_codes);
  void ema_update(const Encoder<T>& student);

  const Encoder<T>& teacher() const { return teacher_; }
  Encoder<T>& teacher() { return teacher_; }
  const std::deque<std::vector<T>>& queue() const { return queue_; }
  std::deque<std::vector<T>>& queue() { return queue_; }
  const ContrastiveConfig& config() const { return cfg_; }

 private:
  ContrastiveConfig cfg_;
  Encoder<T> teacher_;
  std::deque<std::vector<T>> queue_;
};

double combine_losses(double pix, double dc, double ctr, const LossWeights& w);

// pix + λ_dc dc + λ_ctr ctr; ctr may be undefined (treated as 0).
template <typename T>
Tensor<T> total_loss(const Tensor<T>& pix, const Tensor<T>& dc, const Tensor<T>& ctr,
                     const LossWeights& w);

}  // namespace expx
