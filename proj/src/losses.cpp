#include "expx/losses.hpp"

#include <algorithm>
#include <cmath>

#include "expx/ops.hpp"

namespace expx {

void ContrastiveConfig::validate() const {
  if (!(tau > 0)) throw ConfigError("contrastive: tau must be positive");
  if (!(percentile > 0 && percentile <= 100))
    throw ConfigError("contrastive: percentile must be in (0, 100]");
  if (!(momentum >= 0 && momentum <= 1)) throw ConfigError("contrastive: momentum must be in [0, 1]");
}

template <typename T>
Tensor<T> loss_pix(const Tensor<T>& pred, const Tensor<T>& ref) {
  return ops::mean(ops::abs(ops::sub(pred, ref)));
}

template <typename T>
Tensor<T> loss_dc(const Tensor<T>& pred, const Tensor<T>& ref, std::int64_t window) {
  if (pred.shape() != ref.shape())
    throw ShapeError("loss_dc: shapes differ (" + shape_str(pred.shape()) + " vs " +
                     shape_str(ref.shape()) + ")");
  return ops::mean(ops::abs(ops::sub(ops::dark_channel(pred, window), ops::dark_channel(ref, window))));
}

double nearest_rank_percentile(std::vector<double> values, double percent) {
  if (values.empty()) throw ConfigError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(percent / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return values[rank - 1];
}

template <typename T>
ContrastiveResult<T> contrastive_loss(const Tensor<T>& student, const Tensor<T>& teacher,
                                      const std::deque<std::vector<T>>& queue,
                                      const ContrastiveConfig& cfg,
                                      std::optional<double> delta_override) {
  cfg.validate();
  if (student.ndim() != 2 || teacher.shape() != student.shape())
    throw ShapeError("contrastive_loss: student " + shape_str(student.shape()) + " and teacher " +
                     shape_str(teacher.shape()) + " must both be [B,D]");
  const std::int64_t b = student.dim(0), d = student.dim(1);
  ContrastiveResult<T> r;
  r.anchors = static_cast<int>(b);
  if (b < 2) {
    r.degenerate = true;
    r.loss = Tensor<T>::scalar(T(0));
    return r;
  }

  Tensor<T> unit_teacher;
  {
    NoGradGuard no_grad;
    unit_teacher = ops::l2_normalize_rows(teacher.detach(), static_cast<T>(cfg.norm_eps));
  }
  const std::int64_t m = b + static_cast<std::int64_t>(queue.size());
  std::vector<T> cand(unit_teacher.data().begin(), unit_teacher.data().end());
  cand.reserve(static_cast<std::size_t>(m * d));
  for (const auto& q : queue) {
    if (static_cast<std::int64_t>(q.size()) != d)
      throw ShapeError("contrastive_loss: queue entry width " + std::to_string(q.size()) +
                       " vs descriptor width " + std::to_string(d));
    cand.insert(cand.end(), q.begin(), q.end());
  }

  std::vector<std::uint8_t> valid(static_cast<std::size_t>(b * m), 1);
  std::vector<std::uint8_t> positive(static_cast<std::size_t>(b * m), 0);
  for (std::int64_t i = 0; i < b; ++i) {
    valid[i * m + i] = 0;
    std::vector<double> dist(static_cast<std::size_t>(m), 0.0);
    std::vector<double> others;
    others.reserve(static_cast<std::size_t>(m - 1));
    for (std::int64_t a = 0; a < m; ++a) {
      if (a == i) continue;
      double ss = 0;
      for (std::int64_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(cand[i * d + k]) - cand[a * d + k];
        ss += diff * diff;
      }
      dist[a] = std::sqrt(ss);
      others.push_back(dist[a]);
    }
    const double delta =
        delta_override ? *delta_override : nearest_rank_percentile(others, cfg.percentile);
    for (std::int64_t a = 0; a < m; ++a)
      if (a != i && dist[a] <= delta) positive[i * m + a] = 1;
  }

  const Tensor<T> cand_t({m, d}, std::move(cand));
  const auto unit_student = ops::l2_normalize_rows(student, static_cast<T>(cfg.norm_eps));
  const auto logits = ops::scale(ops::matmul(unit_student, cand_t, false, true), static_cast<T>(1.0 / cfg.tau));
  int alive = 0;
  r.loss = ops::multi_positive_nce(logits, valid, positive, &alive);
  r.skipped = r.anchors - alive;
  return r;
}

template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double momentum) {
  if (teacher.size() != student.size())
    throw ShapeError("ema_update: parameter count mismatch");
  const T m = static_cast<T>(momentum);
  const T one_minus = static_cast<T>(1.0 - momentum);
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    const auto& [tn, tt] = teacher.entries()[k];
    const auto& [sn, st] = student.entries()[k];
    if (tn != sn || tt.shape() != st.shape())
      throw ShapeError("ema_update: parameter " + tn + " does not match " + sn);
    auto dst = Tensor<T>(tt).mutable_data();
    const auto src = st.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = m * dst[i] + one_minus * src[i];
  }
}

template <typename T>
ContrastiveState<T>::ContrastiveState(const Encoder<T>& student, const ContrastiveConfig& cfg)
    : cfg_(cfg), teacher_(student) {
  cfg_.validate();
  teacher_.params().set_requires_grad(false);
}

template <typename T>
Tensor<T> ContrastiveState<T>::teacher_codes(const Tensor<T>& images) const {
  NoGradGuard no_grad;
  return ops::l2_normalize_rows(teacher_.encode(images), static_cast<T>(cfg_.norm_eps));
}

template <typename T>
ContrastiveResult<T> ContrastiveState<T>::step_loss(const Tensor<T>& student_z,
                                                    const Tensor<T>& images,
                                                    std::optional<double> delta_override) {
  const auto codes = teacher_codes(images);
  auto r = contrastive_loss(student_z, codes, queue_, cfg_, delta_override);
  enqueue(codes);
  return r;
}

template <typename T>
void ContrastiveState<T>::enqueue(const Tensor<T>& unit_codes) {
  if (unit_codes.ndim() != 2) throw ShapeError("enqueue: expected [B,D]");
  const std::int64_t b = unit_codes.dim(0), d = unit_codes.dim(1);
  for (std::int64_t i = 0; i < b; ++i) {
    queue_.emplace_back(unit_codes.data().begin() + i * d, unit_codes.data().begin() + (i + 1) * d);
    while (queue_.size() > cfg_.queue_capacity) queue_.pop_front();
  }
}

template <typename T>
void ContrastiveState<T>::ema_update(const Encoder<T>& student) {
  expx::ema_update(teacher_.params(), student.params(), cfg_.momentum);
}

double combine_losses(double pix, double dc, double ctr, const LossWeights& w) {
  return pix + w.lambda_dc * dc + w.lambda_ctr * ctr;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& pix, const Tensor<T>& dc, const Tensor<T>& ctr,
                     const LossWeights& w) {
  auto total = ops::add(pix, ops::scale(dc, static_cast<T>(w.lambda_dc)));
  if (ctr.defined()) total = ops::add(total, ops::scale(ctr, static_cast<T>(w.lambda_ctr)));
  return total;
}

#define EXPX_INSTANTIATE_LOSSES(T)                                                              \
  template Tensor<T> loss_pix(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> loss_dc(const Tensor<T>&, const Tensor<T>&, std::int64_t);                \
  template ContrastiveResult<T> contrastive_loss(const Tensor<T>&, const Tensor<T>&,           \
                                                 const std::deque<std::vector<T>>&,            \
                                                 const ContrastiveConfig&, std::optional<double>); \
  template void ema_update(ParamSet<T>&, const ParamSet<T>&, double);                          \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                const LossWeights&);                                           \
  template class ContrastiveState<T>;

EXPX_INSTANTIATE_LOSSES(float)
EXPX_INSTANTIATE_LOSSES(double)

}  // namespace expx
