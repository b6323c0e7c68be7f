#pragma once

// Content-agnostic exposure encoder. Three signals feed a two-layer MLP:
//   region   gray -> 3×(conv s2, instance norm, ReLU) -> self-attention
//            -> 2×2 average pool -> 256
//   contrast Sobel magnitude -> 2×(conv s2, ReLU) -> 2×2 pool -> linear -> 32
//   stats    luminance moments and saturation fractions -> 6
// and [region; contrast; stats] (294) -> 128 -> ReLU -> 66.

#include <array>
#include <cstdint>

#include "expx/nn.hpp"
#include "expx/tensor.hpp"

namespace expx {

inline constexpr std::int64_t kDescriptorWidth = 66;

struct EncoderConfig {
  std::array<std::int64_t, 3> region_channels{16, 32, 64};
  std::int64_t attention_qk_channels = 8;
  std::array<std::int64_t, 2> contrast_channels{8, 16};
  std::int64_t region_features = 256;
  std::int64_t contrast_features = 32;
  std::int64_t stat_features = 6;
  std::int64_t fusion_in = 294;
  std::int64_t hidden = 128;
  std::int64_t descriptor = kDescriptorWidth;
  double norm_eps = 1e-5;

  // Throws ConfigError unless the branch widths add up to fusion_in.
  void validate() const;
};

template <typename T>
class Encoder {
 public:
  struct Parts {
    Tensor<T> gray, gradient, region, contrast, stats, z;
  };

  Encoder(const EncoderConfig& cfg, Rng& rng);
  explicit Encoder(const EncoderConfig& cfg = {});
  // Copies are deep: the new encoder owns its own parameters.
  Encoder(const Encoder& other);
  Encoder& operator=(const Encoder& other);
  Encoder(Encoder&&) noexcept = default;
  Encoder& operator=(Encoder&&) noexcept = default;
  template <typename U>
  explicit Encoder(const Encoder<U>& other) : Encoder(other.config()) {
    params_.assign_from(other.params());
  }

  // gray [N,1,H,W], H, W >= 16 -> [N, region_features]
  Tensor<T> region_branch(const Tensor<T>& gray) const;
  // gradient magnitude [N,1,H,W], H, W >= 8 -> [N, contrast_features]
  Tensor<T> contrast_branch(const Tensor<T>& gradient) const;
  // [N,256], [N,32], [N,6] -> [N,66]
  Tensor<T> fuse(const Tensor<T>& region, const Tensor<T>& contrast, const Tensor<T>& stats) const;

  // rgb [N,3,H,W] -> descriptors [N,66]
  Tensor<T> encode(const Tensor<T>& rgb) const { return encode_parts(rgb).z; }
  Parts encode_parts(const Tensor<T>& rgb) const;

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const EncoderConfig& config() const { return cfg_; }

  // Direct layer access for tests.
  SelfAttention<T>& attention() { return attention_; }

 private:
  void build(Rng& rng);

  EncoderConfig cfg_;
  ParamSet<T> params_;
  std::array<Conv2d<T>, 3> region_convs_;
  SelfAttention<T> attention_;
  std::array<Conv2d<T>, 2> contrast_convs_;
  Linear<T> contrast_proj_;
  Linear<T> fuse1_, fuse2_;
};

}  // namespace expx
