#include "expx/modnet.hpp"

#include "expx/ops.hpp"

namespace expx {

template <typename T>
Tensor<T> film_apply(const Tensor<T>& features, const Tensor<T>& alpha, const Tensor<T>& beta) {
  return ops::channel_affine(features, alpha, beta);
}

template <typename T>
Tensor<T> pcr_apply(const Tensor<T>& features, const Tensor<T>& gate) {
  return ops::channel_affine(features, ops::add_scalar(gate, T(1)), Tensor<T>());
}

template <typename T>
Tensor<T> delta_z(const Tensor<T>& z_src, const Tensor<T>& z_ref) {
  if (z_src.ndim() != z_ref.ndim() || z_src.dim(z_src.ndim() - 1) != z_ref.dim(z_ref.ndim() - 1))
    throw ShapeError("delta_z: descriptor widths differ (" + shape_str(z_src.shape()) + " vs " +
                     shape_str(z_ref.shape()) + ")");
  return ops::sub(z_ref, z_src);
}

template <typename T>
ModNet<T>::ModNet(const ModNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  build(rng);
}

template <typename T>
ModNet<T>::ModNet(const ModNetConfig& cfg) : cfg_(cfg) {
  Rng rng(0);
  build(rng);
}

template <typename T>
ModNet<T>::ModNet(const ModNet& other) : ModNet(other.cfg_) {
  params_.assign_from(other.params_);
}

template <typename T>
ModNet<T>& ModNet<T>::operator=(const ModNet& other) {
  if (this != &other) *this = ModNet(other);
  return *this;
}

template <typename T>
void ModNet<T>::build(Rng& rng) {
  const auto& c = cfg_.channels;
  enc_[0] = Conv2d<T>::make(params_, "enc1", 3, c[0], 3, 1, rng);
  enc_[1] = Conv2d<T>::make(params_, "enc2", c[0], c[1], 3, 1, rng);
  enc_[2] = Conv2d<T>::make(params_, "enc3", c[1], c[2], 3, 1, rng);
  dec2_ = Conv2d<T>::make(params_, "dec2", c[2] + c[1], c[1], 3, 1, rng);
  dec1_ = Conv2d<T>::make(params_, "dec1", c[1] + c[0], c[0], 3, 1, rng);
  out_conv_ = Conv2d<T>::make(params_, "out", c[0], 3, 3, 1, rng, Init::Zero);
  for (int i = 0; i < 3; ++i) {
    const std::string s = std::to_string(i + 1);
    film_[i].fc1 = Linear<T>::make(params_, "film" + s + ".fc1", cfg_.descriptor, cfg_.film_hidden, rng);
    film_[i].fc2 =
        Linear<T>::make(params_, "film" + s + ".fc2", cfg_.film_hidden, 2 * c[i], rng, Init::Zero);
    pcr_[i] = Linear<T>::make(params_, "pcr" + s, cfg_.descriptor, c[i], rng);
  }
}

template <typename T>
void ModNet<T>::check_scale(int scale) const {
  if (scale < 1 || scale > 3)
    throw ConfigError("modnet: scale must be 1, 2 or 3, got " + std::to_string(scale));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> ModNet<T>::film_params(const Tensor<T>& dz, int scale) const {
  check_scale(scale);
  const auto& mlp = film_[scale - 1];
  const std::int64_t c = cfg_.channels[scale - 1];
  auto raw = mlp.fc2(ops::relu(mlp.fc1(dz)));
  return {ops::add_scalar(ops::narrow(raw, 1, 0, c), T(1)), ops::narrow(raw, 1, c, c)};
}

template <typename T>
Tensor<T> ModNet<T>::pcr_gate(const Tensor<T>& dz, int scale) const {
  check_scale(scale);
  return ops::sigmoid(pcr_[scale - 1](dz));
}

template <typename T>
ModulationParams<T> ModNet<T>::modulation(const Tensor<T>& dz) const {
  ModulationParams<T> m;
  for (int i = 0; i < 3; ++i) {
    std::tie(m.alpha[i], m.beta[i]) = film_params(dz, i + 1);
    m.gate[i] = pcr_gate(dz, i + 1);
  }
  return m;
}

template <typename T>
Tensor<T> ModNet<T>::modulate(const Tensor<T>& f, const Tensor<T>& dz, int scale) const {
  auto [alpha, beta] = film_params(dz, scale);
  return pcr_apply(film_apply(f, alpha, beta), pcr_gate(dz, scale));
}

template <typename T>
typename ModNet<T>::Output ModNet<T>::forward(const Tensor<T>& images, const Tensor<T>& dz) const {
  if (images.ndim() != 4 || images.dim(1) != 3)
    throw ShapeError("modnet: expected images [N,3,H,W], got " + shape_str(images.shape()));
  if (dz.ndim() != 2 || dz.dim(0) != images.dim(0) || dz.dim(1) != cfg_.descriptor)
    throw ShapeError("modnet: dz must be [" + std::to_string(images.dim(0)) + "," +
                     std::to_string(cfg_.descriptor) + "], got " + shape_str(dz.shape()));
  const std::int64_t h = images.dim(2), w = images.dim(3);
  if (h < 4 || w < 4) throw ShapeError("modnet: images must be at least 4x4");
  const std::int64_t ph = (4 - h % 4) % 4, pw = (4 - w % 4) % 4;
  const Tensor<T> x =
      (ph || pw) ? ops::pad2d(images, 0, ph, 0, pw, ops::PadMode::Reflect) : images;

  const auto f1 = modulate(ops::relu(enc_[0](x)), dz, 1);
  const auto f2 = modulate(ops::relu(enc_[1](ops::avg_downsample(f1, 2))), dz, 2);
  const auto f3 = modulate(ops::relu(enc_[2](ops::avg_downsample(f2, 2))), dz, 3);
  const auto d2 = ops::relu(dec2_(ops::concat<T>({ops::upsample_bilinear(f3, 2), f2}, 1)));
  const auto d1 = ops::relu(dec1_(ops::concat<T>({ops::upsample_bilinear(d2, 2), f1}, 1)));
  auto residual = out_conv_(d1);
  auto corrected = ops::clamp(ops::add(x, residual), T(0), T(1));
  if (ph || pw) {
    residual = ops::crop2d(residual, 0, 0, h, w);
    corrected = ops::crop2d(corrected, 0, 0, h, w);
  }
  return {residual, corrected};
}

template class ModNet<float>;
template class ModNet<double>;
template Tensor<float> film_apply(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> film_apply(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template Tensor<float> pcr_apply(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> pcr_apply(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> delta_z(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> delta_z(const Tensor<double>&, const Tensor<double>&);

}  // namespace expx
