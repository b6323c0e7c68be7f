#pragma once

// Independent reference implementations used only by the tests. These are
// deliberately naive: direct loops straight from the textbook definitions,
// sharing no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "expx/image.hpp"
#include "expx/nn.hpp"
#include "expx/ops.hpp"
#include "expx/tensor.hpp"

namespace oracle {

using expx::Image;

inline Image random_image(std::mt19937_64& rng, std::int64_t h, std::int64_t w) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

inline std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n, double lo = -1,
                                      double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Six nested loops, zero padding.
inline std::vector<double> conv2d(const std::vector<double>& in, std::int64_t n, std::int64_t c,
                                  std::int64_t h, std::int64_t w, const std::vector<double>& wt,
                                  std::int64_t co, std::int64_t k, const std::vector<double>& bias,
                                  std::int64_t stride, std::int64_t pad, std::int64_t* oh_out,
                                  std::int64_t* ow_out) {
  const std::int64_t oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
  *oh_out = oh;
  *ow_out = ow;
  std::vector<double> out(n * co * oh * ow, 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
          double s = bias.empty() ? 0.0 : bias[o];
          for (std::int64_t i = 0; i < c; ++i)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::int64_t iy = y * stride - pad + ky, ix = x * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                s += in[((b * c + i) * h + iy) * w + ix] * wt[((o * c + i) * k + ky) * k + kx];
              }
          out[((b * co + o) * oh + y) * ow + x] = s;
        }
  return out;
}

struct Moments {
  long double mu, sigma, skew, kurt, p_under, p_over;
};

// Long-double direct sums.
inline Moments moments(const std::vector<float>& v, double tu = 0.05, double to = 0.95) {
  const long double n = static_cast<long double>(v.size());
  long double s = 0;
  for (float x : v) s += x;
  const long double mu = s / n;
  long double m2 = 0, m3 = 0, m4 = 0, under = 0, over = 0;
  for (float x : v) {
    const long double d = x - mu;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
    if (x < tu) under += 1;
    if (x > to) over += 1;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  const long double sigma = std::sqrt(m2);
  Moments r{mu, sigma, 0, 3, under / n, over / n};
  if (sigma >= 1e-8L) {
    r.skew = m3 / (sigma * sigma * sigma);
    r.kurt = m4 / (m2 * m2);
  }
  return r;
}

inline std::vector<float> gray(const Image& img) {
  std::vector<float> g(img.plane());
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x) {
      const float v = 0.2989f * img.at(0, y, x) + 0.5870f * img.at(1, y, x) + 0.1140f * img.at(2, y, x);
      g[y * img.width + x] = std::clamp(v, 0.0f, 1.0f);
    }
  return g;
}

// Per-pixel double loop; window for x spans [x - (k-1)/2, x + k/2].
inline std::vector<float> dark_channel(const Image& img, std::int64_t k = 16) {
  const std::int64_t lo = (k - 1) / 2, hi = k / 2;
  std::vector<float> out(img.plane());
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x) {
      float m = 1e30f;
      for (int c = 0; c < 3; ++c)
        for (std::int64_t dy = -lo; dy <= hi; ++dy)
          for (std::int64_t dx = -lo; dx <= hi; ++dx) {
            const auto yy = std::clamp<std::int64_t>(y + dy, 0, img.height - 1);
            const auto xx = std::clamp<std::int64_t>(x + dx, 0, img.width - 1);
            m = std::min(m, img.at(c, yy, xx));
          }
      out[y * img.width + x] = m;
    }
  return out;
}

// 3x3 Sobel, replicate border, hand-expanded.
inline std::vector<double> sobel(const std::vector<float>& g, std::int64_t h, std::int64_t w) {
  auto p = [&](std::int64_t y, std::int64_t x) -> double {
    return g[std::clamp<std::int64_t>(y, 0, h - 1) * w + std::clamp<std::int64_t>(x, 0, w - 1)];
  };
  std::vector<double> out(h * w);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double gx = (p(y - 1, x + 1) + 2 * p(y, x + 1) + p(y + 1, x + 1)) -
                        (p(y - 1, x - 1) + 2 * p(y, x - 1) + p(y + 1, x - 1));
      const double gy = (p(y + 1, x - 1) + 2 * p(y + 1, x) + p(y + 1, x + 1)) -
                        (p(y - 1, x - 1) + 2 * p(y - 1, x) + p(y - 1, x + 1));
      out[y * w + x] = std::sqrt(gx * gx + gy * gy);
    }
  return out;
}

inline double psnr(const Image& a, const Image& b) {
  long double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const long double d = static_cast<long double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  const long double mse = se / a.pixels.size();
  return static_cast<double>(-10.0L * std::log10(mse));
}

// Direct 2-d Gaussian-weighted window statistics at every valid position.
inline double ssim(const Image& a, const Image& b) {
  const int k = 11;
  double wsum = 0;
  double win[11][11];
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) wsum += win[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    double s = 0;
    int count = 0;
    for (std::int64_t y = 0; y + k <= a.height; ++y)
      for (std::int64_t x = 0; x + k <= a.width; ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const double wv = win[i][j] / wsum;
            const double u = a.at(c, y + i, x + j), v = b.at(c, y + i, x + j);
            mx += wv * u;
            my += wv * v;
            sxx += wv * u * u;
            syy += wv * v * v;
            sxy += wv * u * v;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        s += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    total += s / count;
  }
  return total / 3;
}

// Scalar evaluation of the multi-positive contrastive objective straight
// from its definition, including percentile thresholds.
inline double contrastive(const std::vector<std::vector<double>>& student,
                          const std::vector<std::vector<double>>& teacher,
                          const std::vector<std::vector<double>>& queue, double tau, double pct,
                          int* skipped = nullptr) {
  auto unit = [](std::vector<double> v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    return v;
  };
  std::vector<std::vector<double>> cand;
  for (const auto& t : teacher) cand.push_back(unit(t));
  for (const auto& q : queue) cand.push_back(q);
  const std::size_t b = student.size();
  double total = 0;
  int alive = 0, skip = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto s = unit(student[i]);
    std::vector<double> dist;
    std::vector<std::size_t> idx;
    for (std::size_t a = 0; a < cand.size(); ++a) {
      if (a == i) continue;
      double d = 0;
      for (std::size_t k = 0; k < s.size(); ++k) d += (cand[i][k] - cand[a][k]) * (cand[i][k] - cand[a][k]);
      dist.push_back(std::sqrt(d));
      idx.push_back(a);
    }
    auto sorted = dist;
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * n));
    rank = std::clamp<std::size_t>(rank, 1, n);
    const double delta = sorted[rank - 1];
    double denom = 0;
    std::vector<double> pos_logits;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < s.size(); ++k) dot += s[k] * cand[idx[j]][k];
      denom += std::exp(dot / tau);
      if (dist[j] <= delta) pos_logits.push_back(dot / tau);
    }
    if (pos_logits.empty()) {
      ++skip;
      continue;
    }
    double li = 0;
    for (double l : pos_logits) li -= std::log(std::exp(l) / denom);
    total += li / pos_logits.size();
    ++alive;
  }
  if (skipped) *skipped = skip;
  return alive ? total / alive : 0.0;
}

// Central-difference check of d loss / d params at sampled coordinates,
// relative error |a - n| / max(|a|, |n|, floor). A coordinate whose +/-step
// evaluations take different piecewise branches (ReLU masks, clamp regions,
// min-filter argmins) straddles a kink; it is redrawn (up to max_redraw
// times overall) and counted in `straddled`.
struct GradCheck {
  int checked = 0;
  int failed = 0;
  int straddled = 0;
  double worst = 0;
};

inline GradCheck finite_difference(const std::function<expx::TensorD()>& loss,
                                   std::vector<expx::TensorD> params, int samples,
                                   std::uint64_t seed, double step = 1e-3, double tol = 1e-3,
                                   double floor = 1e-6, int max_redraw = 1000) {
  for (auto& p : params) p.clear_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params)
    analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                       : std::vector<double>(p.numel(), 0.0));
  std::int64_t total = 0;
  for (auto& p : params) total += p.numel();
  std::mt19937_64 rng(seed);
  GradCheck r;
  while (r.checked < samples) {
    std::int64_t flat = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(total));
    std::size_t k = 0;
    while (flat >= params[k].numel()) flat -= params[k++].numel();
    auto data = params[k].mutable_data();
    const double orig = data[flat];
    double lp, lm;
    std::uint64_t hp, hm;
    {
      expx::NoGradGuard ng;
      {
        expx::ops::BranchTrace trace;
        data[flat] = orig + step;
        lp = loss().item();
        hp = trace.hash();
      }
      {
        expx::ops::BranchTrace trace;
        data[flat] = orig - step;
        lm = loss().item();
        hm = trace.hash();
      }
      data[flat] = orig;
    }
    if (hp != hm && r.straddled < max_redraw) {
      ++r.straddled;
      continue;
    }
    const double num = (lp - lm) / (2 * step), ana = analytic[k][flat];
    const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), floor});
    r.worst = std::max(r.worst, rel);
    ++r.checked;
    if (rel > tol) ++r.failed;
  }
  return r;
}

template <typename T>
std::vector<expx::Tensor<T>> tensors_of(const expx::ParamSet<T>& ps) {
  std::vector<expx::Tensor<T>> out;
  for (const auto& e : ps.entries()) out.push_back(e.second);
  return out;
}

// Moves every parameter off its initial value so zero-initialized layers
// do not hide gradient paths.
template <typename T>
void perturb(const expx::ParamSet<T>& ps, std::uint64_t seed, double scale = 0.1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (const auto& e : ps.entries()) {
    auto t = e.second;
    for (auto& v : t.mutable_data()) v = static_cast<T>(v + u(rng));
  }
}

}  // namespace oracle
