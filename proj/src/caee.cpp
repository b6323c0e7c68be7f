#include "expx/caee.hpp"

#include "expx/ops.hpp"
#include "expx/photometric.hpp"

namespace expx {

void EncoderConfig::validate() const {
  if (region_channels[2] * 4 != region_features)
    throw ConfigError("encoder: region branch yields " + std::to_string(region_channels[2] * 4) +
                      " features after 2x2 pooling, expected " + std::to_string(region_features));
  if (stat_features != static_cast<std::int64_t>(kStatCount))
    throw ConfigError("encoder: stat features must be " + std::to_string(kStatCount));
  const auto width = region_features + contrast_features + stat_features;
  if (width != fusion_in)
    throw ConfigError("encoder: fusion input width " + std::to_string(fusion_in) +
                      " does not match branch widths " + std::to_string(region_features) + "+" +
                      std::to_string(contrast_features) + "+" + std::to_string(stat_features) +
                      " = " + std::to_string(width));
  if (descriptor < 1 || hidden < 1 || attention_qk_channels < 1)
    throw ConfigError("encoder: widths must be positive");
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  build(rng);
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
  Rng rng(0);
  build(rng);
}

template <typename T>
Encoder<T>::Encoder(const Encoder& other) : Encoder(other.cfg_) {
  params_.assign_from(other.params_);
}

template <typename T>
Encoder<T>& Encoder<T>::operator=(const Encoder& other) {
  if (this != &other) *this = Encoder(other);
  return *this;
}

template <typename T>
void Encoder<T>::build(Rng& rng) {
  cfg_.validate();
  std::int64_t in = 1;
  for (int i = 0; i < 3; ++i) {
    region_convs_[i] = Conv2d<T>::make(params_, "region.conv" + std::to_string(i + 1), in,
                                       cfg_.region_channels[i], 3, 2, rng);
    in = cfg_.region_channels[i];
  }
  attention_ = SelfAttention<T>::make(params_, "region.attention", in, cfg_.attention_qk_channels, rng);
  in = 1;
  for (int i = 0; i < 2; ++i) {
    contrast_convs_[i] = Conv2d<T>::make(params_, "contrast.conv" + std::to_string(i + 1), in,
                                         cfg_.contrast_channels[i], 3, 2, rng);
    in = cfg_.contrast_channels[i];
  }
  contrast_proj_ =
      Linear<T>::make(params_, "contrast.proj", in * 4, cfg_.contrast_features, rng);
  fuse1_ = Linear<T>::make(params_, "fuse.fc1", cfg_.fusion_in, cfg_.hidden, rng);
  fuse2_ = Linear<T>::make(params_, "fuse.fc2", cfg_.hidden, cfg_.descriptor, rng);
}

template <typename T>
Tensor<T> Encoder<T>::region_branch(const Tensor<T>& gray) const {
  if (gray.ndim() != 4 || gray.dim(1) != 1)
    throw ShapeError("region_branch: expected [N,1,H,W], got " + shape_str(gray.shape()));
  if (gray.dim(2) < 16 || gray.dim(3) < 16)
    throw ShapeError("region_branch: input " + std::to_string(gray.dim(2)) + "x" +
                     std::to_string(gray.dim(3)) + " is too small for three stride-2 stages (min 16)");
  Tensor<T> x = gray;
  for (const auto& conv : region_convs_)
    x = ops::relu(ops::instance_norm(conv(x), static_cast<T>(cfg_.norm_eps)));
  x = attention_(x);
  x = ops::adaptive_avg_pool2d(x, 2, 2);
  return ops::reshape(x, {gray.dim(0), cfg_.region_features});
}

template <typename T>
Tensor<T> Encoder<T>::contrast_branch(const Tensor<T>& gradient) const {
  if (gradient.ndim() != 4 || gradient.dim(1) != 1)
    throw ShapeError("contrast_branch: expected [N,1,H,W], got " + shape_str(gradient.shape()));
  if (gradient.dim(2) < 8 || gradient.dim(3) < 8)
    throw ShapeError("contrast_branch: input " + std::to_string(gradient.dim(2)) + "x" +
                     std::to_string(gradient.dim(3)) + " is too small (min 8)");
  Tensor<T> x = gradient;
  for (const auto& conv : contrast_convs_) x = ops::relu(conv(x));
  x = ops::adaptive_avg_pool2d(x, 2, 2);
  x = ops::reshape(x, {gradient.dim(0), cfg_.contrast_channels[1] * 4});
  return contrast_proj_(x);
}

template <typename T>
Tensor<T> Encoder<T>::fuse(const Tensor<T>& region, const Tensor<T>& contrast,
                           const Tensor<T>& stats) const {
  auto x = ops::concat<T>({region, contrast, stats}, 1);
  if (x.dim(1) != cfg_.fusion_in)
    throw ShapeError("fuse: concatenated width (dim 1) = " + std::to_string(x.dim(1)) +
                     ", expected " + std::to_string(cfg_.fusion_in));
  return fuse2_(ops::relu(fuse1_(x)));
}

template <typename T>
typename Encoder<T>::Parts Encoder<T>::encode_parts(const Tensor<T>& rgb) const {
  Parts p;
  p.gray = luminance(rgb);
  p.gradient = sobel(p.gray).magnitude;
  p.stats = stat_rows(p.gray);
  p.region = region_branch(p.gray);
  p.contrast = contrast_branch(p.gradient);
  p.z = fuse(p.region, p.contrast, p.stats);
  return p;
}

template class Encoder<float>;
template class Encoder<double>;

}  // namespace expx
