#include "expx/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <vector>

#include "expx/error.hpp"

namespace expx {
namespace {

void check_same(const Image& a, const Image& b, const char* who) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError(std::string(who) + ": size mismatch " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width));
}

std::vector<double> gaussian(int n, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(n));
  const double c = (n - 1) / 2.0;
  double s = 0;
  for (int i = 0; i < n; ++i) s += g[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  for (auto& v : g) v /= s;
  return g;
}

// Separable "valid" filtering of a plane.
std::vector<double> filter_valid(const std::vector<double>& src, std::int64_t h, std::int64_t w,
                                 const std::vector<double>& k) {
  const auto n = static_cast<std::int64_t>(k.size());
  const auto oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h * ow));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::int64_t i = 0; i < n; ++i) s += k[i] * src[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::int64_t i = 0; i < n; ++i) s += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  check_same(a, b, "psnr");
  double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(a.pixels.size()) / se);
}

double ssim(const Image& a, const Image& b, const SsimConfig& cfg) {
  check_same(a, b, "ssim");
  if (std::min(a.height, a.width) < cfg.window)
    throw ShapeError("ssim: image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " is smaller than the " + std::to_string(cfg.window) + "x" +
                     std::to_string(cfg.window) + " window");
  const auto k = gaussian(cfg.window, cfg.sigma);
  const double c1 = std::pow(cfg.k1 * cfg.dynamic_range, 2);
  const double c2 = std::pow(cfg.k2 * cfg.dynamic_range, 2);
  const auto h = a.height, w = a.width, n = a.plane();
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    const auto pa = a.channel(c), pb = b.channel(c);
    for (std::int64_t i = 0; i < n; ++i) {
      x[i] = pa[i];
      y[i] = pb[i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
    const auto sxx = filter_valid(xx, h, w, k), syy = filter_valid(yy, h, w, k);
    const auto sxy = filter_valid(xy, h, w, k);
    double s = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      s += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += s / static_cast<double>(mx.size());
  }
  return total / 3.0;
}

MetricReport compare(const Image& a, const Image& b) { return {psnr(a, b), ssim(a, b)}; }

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace expx
