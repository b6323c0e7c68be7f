#pragma once

// Three-scale U-shaped correction network conditioned on the descriptor
// shift dz = z_ref - z_src. Each encoder feature map F_i is modulated
// channel-wise by FiLM (alpha_i * F_i + beta_i) and then rebalanced by
// (1 + a_i), a_i = sigmoid(W_i dz + b_i). The decoder predicts a residual R
// and the output is clip(I_src + R, 0, 1).

#include <array>
#include <cstdint>
#include <utility>

#include "expx/caee.hpp"
#include "expx/nn.hpp"
#include "expx/tensor.hpp"

namespace expx {

struct ModNetConfig {
  std::array<std::int64_t, 3> channels{32, 64, 64};
  std::int64_t descriptor = kDescriptorWidth;
  std::int64_t film_hidden = 64;
};

template <typename T>
struct ModulationParams {
  std::array<Tensor<T>, 3> alpha, beta, gate;  // each [N, C_i]
};

// alpha ⊙ F + beta, per channel and sample.
template <typename T>
Tensor<T> film_apply(const Tensor<T>& features, const Tensor<T>& alpha, const Tensor<T>& beta);
// (1 + gate) ⊙ F, per channel and sample.
template <typename T>
Tensor<T> pcr_apply(const Tensor<T>& features, const Tensor<T>& gate);

template <typename T>
Tensor<T> delta_z(const Tensor<T>& z_src, const Tensor<T>& z_ref);

template <typename T>
class ModNet {
 public:
  struct Output {
    Tensor<T> residual;   // [N,3,H,W]
    Tensor<T> corrected;  // [N,3,H,W], in [0,1]
  };

  ModNet(const ModNetConfig& cfg, Rng& rng);
  explicit ModNet(const ModNetConfig& cfg = {});
  ModNet(const ModNet& other);
  ModNet& operator=(const ModNet& other);
  ModNet(ModNet&&) noexcept = default;
  ModNet& operator=(ModNet&&) noexcept = default;
  template <typename U>
  explicit ModNet(const ModNet<U>& other) : ModNet(other.config()) {
    params_.assign_from(other.params());
  }

  // scale is 1, 2 or 3. alpha = 1 + raw so the zero-initialized output
  // layer starts at (alpha, beta) = (1, 0).
  std::pair<Tensor<T>, Tensor<T>> film_params(const Tensor<T>& dz, int scale) const;
  Tensor<T> pcr_gate(const Tensor<T>& dz, int scale) const;
  ModulationParams<T> modulation(const Tensor<T>& dz) const;

  // images [N,3,H,W] with H, W >= 4, dz [N,66]. Sizes that are not a
  // multiple of 4 are reflect-padded and the result cropped back.
  Output forward(const Tensor<T>& images, const Tensor<T>& dz) const;

  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const ModNetConfig& config() const { return cfg_; }
  Conv2d<T>& output_conv() { return out_conv_; }

 private:
  struct FilmMlp {
    Linear<T> fc1, fc2;
  };

  void build(Rng& rng);
  void check_scale(int scale) const;
  Tensor<T> modulate(const Tensor<T>& f, const Tensor<T>& dz, int scale) const;

  ModNetConfig cfg_;
  ParamSet<T> params_;
  std::array<Conv2d<T>, 3> enc_;
  Conv2d<T> dec2_, dec1_, out_conv_;
  std::array<FilmMlp, 3> film_;
  std::array<Linear<T>, 3> pcr_;
};

}  // namespace expx
