#pragma once

// Differentiable primitives. Every op checks operand shapes, throws
// ShapeError naming the offending dimension, and throws NumericError if it
// produces a non-finite value. Broadcasting exists only where listed
// (conv/linear bias, channel_affine, scale_by).

#include <cstdint>
#include <vector>

#include "expx/tensor.hpp"

namespace expx::ops {

enum class PadMode { Replicate, Reflect };

// Fingerprint of the piecewise branches (ReLU/clamp/abs regions, dark
// channel argmins) taken by ops on this thread while the trace is alive.
// Two evaluations with equal hashes lie on the same linear piece, which is
// what a finite-difference check needs to be meaningful.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t hash() const { return hash_; }
  void note(std::uint64_t code) { hash_ = (hash_ ^ code) * 0x100000001b3ULL; }

  static BranchTrace* active();

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  BranchTrace* prev_;
};

// Elementwise, identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
// Gradient at 0 is taken as 0.
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
// Gradient passes where lo <= a <= hi.
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

// Reductions to a 1-element tensor.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::int64_t start, std::int64_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

// x[N,in] · weightᵀ + bias, weight [out,in], bias [out] (may be undefined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// [M,K]x[K,N] or batched [B,M,K]x[B,K,N]; transposes apply to the last two axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);

template <typename T> Tensor<T> softmax_last(const Tensor<T>& a);

// input [N,C,H,W], weight [Co,C,k,k], bias [Co] (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::int64_t stride, std::int64_t padding);

template <typename T> Tensor<T> instance_norm(const Tensor<T>& input, T eps);

template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& input, std::int64_t out_h, std::int64_t out_w);

// Bilinear, align_corners = false, integer factor.
template <typename T> Tensor<T> upsample_bilinear(const Tensor<T>& input, std::int64_t factor);
// Mean over non-overlapping factor×factor blocks; H, W must divide.
template <typename T> Tensor<T> avg_downsample(const Tensor<T>& input, std::int64_t factor);

template <typename T>
Tensor<T> pad2d(const Tensor<T>& input, std::int64_t top, std::int64_t bottom, std::int64_t left,
                std::int64_t right, PadMode mode);
template <typename T>
Tensor<T> crop2d(const Tensor<T>& input, std::int64_t top, std::int64_t left, std::int64_t h,
                 std::int64_t w);

// out[n,c,h,w] = scale[n,c] * x[n,c,h,w] + shift[n,c]; either side may be undefined.
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift);

// Multiplies every element by the single value of a 1-element tensor.
template <typename T> Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s);

// Row-wise x / max(||x||, eps) for x [N,D].
template <typename T> Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps);

// Weighted channel sum [N,C,H,W] -> [N,1,H,W].
template <typename T>
Tensor<T> weighted_channel_sum(const Tensor<T>& x, const std::vector<T>& weights);

// Minimum across channels and over a window×window neighbourhood with
// replicate borders: [N,C,H,W] -> [N,1,H,W]. The window for pixel x covers
// [x - (window-1)/2, x + window/2]. The gradient goes to the first argmin
// (channel order, then row-major window scan).
template <typename T> Tensor<T> dark_channel(const Tensor<T>& x, std::int64_t window);

// Multi-positive softmax cross-entropy over logits [B,M]. For each row i,
// candidates are columns with valid(i,a) set; positives are those with
// positive(i,a) set. Rows without positives are skipped. Returns the mean
// over surviving rows (0 when none survive) and stores their count.
template <typename T>
Tensor<T> multi_positive_nce(const Tensor<T>& logits, const std::vector<std::uint8_t>& valid,
                             const std::vector<std::uint8_t>& positive, int* surviving_rows);

}  // namespace expx::ops
