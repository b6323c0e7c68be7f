#pragma once

// Parameter-free image statistics: Sobel gradient magnitude, global
// luminance moments with saturation fractions, and the dark channel.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "expx/image.hpp"
#include "expx/tensor.hpp"

namespace expx {

inline constexpr double kTauUnder = 0.05;
inline constexpr double kTauOver = 0.95;
inline constexpr std::int64_t kDarkChannelWindow = 16;
inline constexpr std::size_t kStatCount = 6;

// Population moments of luminance. kurt is non-excess (Gaussian = 3).
struct StatVector {
  double mu = 0;
  double sigma = 0;
  double skew = 0;
  double kurt = 3;
  double p_under = 0;
  double p_over = 0;

  std::array<double, kStatCount> as_array() const { return {mu, sigma, skew, kurt, p_under, p_over}; }
};

// Below sigma = 1e-8 the standardized moments are defined as (skew, kurt) = (0, 3).
// p_under counts v < tau_u and p_over counts v > tau_o, both strict.
StatVector stat_vector(std::span<const float> values, double tau_u = kTauUnder,
                       double tau_o = kTauOver);
inline StatVector stat_vector(const GrayImage& gray, double tau_u = kTauUnder,
                              double tau_o = kTauOver) {
  return stat_vector(gray.pixels, tau_u, tau_o);
}

// One-line JSON with keys mu, sigma, skew, kurt, p_under, p_over.
std::string to_json(const StatVector& s);

struct GradMap {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> gx, gy, magnitude;
};

// 3×3 Sobel with replicate borders. Requires H, W >= 3.
GradMap sobel(const GrayImage& gray);

struct DarkChannel {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> values;
};

// Per-pixel minimum across RGB over a window×window neighbourhood covering
// [x - (window-1)/2, x + window/2] on each axis, replicate borders.
DarkChannel dark_channel(const Image& img, std::int64_t window = kDarkChannelWindow);

// Differentiable Sobel on [N,1,H,W]; returns the components and magnitude.
template <typename T>
struct SobelResult {
  Tensor<T> gx, gy, magnitude;
};
template <typename T>
SobelResult<T> sobel(const Tensor<T>& gray);

// Luminance [N,1,H,W] from RGB [N,3,H,W], clamped to [0,1].
template <typename T>
Tensor<T> luminance(const Tensor<T>& rgb);

// Stat vectors of every sample of a [N,1,H,W] tensor, as constant [N,6].
template <typename T>
Tensor<T> stat_rows(const Tensor<T>& gray, double tau_u = kTauUnder, double tau_o = kTauOver);

}  // namespace expx
