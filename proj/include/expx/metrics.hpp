#pragma once

// Full-reference quality metrics on [0,1] images.

#include <limits>
#include <string>

#include "expx/image.hpp"

namespace expx {

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

// 10 log10(1 / MSE) over all channels; +inf for identical images.
double psnr(const Image& a, const Image& b);

// Mean SSIM over valid window positions, per channel, then averaged over
// channels. Requires min(H, W) >= window.
double ssim(const Image& a, const Image& b, const SsimConfig& cfg = {});

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
};

MetricReport compare(const Image& a, const Image& b);

// "inf" for infinite values, fixed 6 decimals otherwise.
std::string format_metric(double v);

}  // namespace expx
