#include "expx/photometric.hpp"

#include <cmath>

#include "json.hpp"

#include "expx/ops.hpp"

namespace expx {

StatVector stat_vector(std::span<const float> values, double tau_u, double tau_o) {
  if (values.empty()) throw ShapeError("stat_vector: empty image");
  const double n = static_cast<double>(values.size());
  double sum = 0;
  std::size_t under = 0, over = 0;
  for (const float v : values) {
    sum += v;
    under += v < tau_u;
    over += v > tau_o;
  }
  StatVector s;
  s.mu = sum / n;
  double m2 = 0, m3 = 0, m4 = 0;
  for (const float v : values) {
    const double d = v - s.mu;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  s.sigma = std::sqrt(m2);
  if (s.sigma < 1e-8) {
    s.skew = 0;
    s.kurt = 3;
  } else {
    s.skew = m3 / (m2 * s.sigma);
    s.kurt = m4 / (m2 * m2);
  }
  s.p_under = static_cast<double>(under) / n;
  s.p_over = static_cast<double>(over) / n;
  return s;
}

std::string to_json(const StatVector& s) {
  nlohmann::ordered_json j;
  j["mu"] = s.mu;
  j["sigma"] = s.sigma;
  j["skew"] = s.skew;
  j["kurt"] = s.kurt;
  j["p_under"] = s.p_under;
  j["p_over"] = s.p_over;
  return j.dump();
}

template <typename T>
SobelResult<T> sobel(const Tensor<T>& gray) {
  if (gray.ndim() != 4 || gray.dim(1) != 1)
    throw ShapeError("sobel: expected [N,1,H,W], got " + shape_str(gray.shape()));
  if (gray.dim(2) < 3 || gray.dim(3) < 3)
    throw ShapeError("sobel: image " + std::to_string(gray.dim(2)) + "x" +
                     std::to_string(gray.dim(3)) + " is smaller than the 3x3 kernel");
  static const std::vector<T> kx = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static const std::vector<T> ky = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  const Tensor<T> wx({1, 1, 3, 3}, kx), wy({1, 1, 3, 3}, ky);
  const auto padded = ops::pad2d(gray, 1, 1, 1, 1, ops::PadMode::Replicate);
  SobelResult<T> r;
  r.gx = ops::conv2d(padded, wx, Tensor<T>(), 1, 0);
  r.gy = ops::conv2d(padded, wy, Tensor<T>(), 1, 0);
  r.magnitude = ops::sqrt(ops::add(ops::square(r.gx), ops::square(r.gy)));
  return r;
}

GradMap sobel(const GrayImage& gray) {
  NoGradGuard no_grad;
  const auto r = sobel(to_tensor<float>(gray));
  GradMap g;
  g.height = gray.height;
  g.width = gray.width;
  g.gx.assign(r.gx.data().begin(), r.gx.data().end());
  g.gy.assign(r.gy.data().begin(), r.gy.data().end());
  g.magnitude.assign(r.magnitude.data().begin(), r.magnitude.data().end());
  return g;
}

DarkChannel dark_channel(const Image& img, std::int64_t window) {
  NoGradGuard no_grad;
  const auto d = ops::dark_channel(to_tensor<float>(img), window);
  return {img.height, img.width, std::vector<float>(d.data().begin(), d.data().end())};
}

template <typename T>
Tensor<T> luminance(const Tensor<T>& rgb) {
  if (rgb.ndim() != 4 || rgb.dim(1) != 3)
    throw ShapeError("luminance: expected [N,3,H,W], got " + shape_str(rgb.shape()));
  return ops::clamp(ops::weighted_channel_sum<T>(rgb, {T(kLumaR), T(kLumaG), T(kLumaB)}), T(0),
                    T(1));
}

template <typename T>
Tensor<T> stat_rows(const Tensor<T>& gray, double tau_u, double tau_o) {
  if (gray.ndim() != 4 || gray.dim(1) != 1)
    throw ShapeError("stat_rows: expected [N,1,H,W], got " + shape_str(gray.shape()));
  const std::int64_t n = gray.dim(0), plane = gray.dim(2) * gray.dim(3);
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(n * kStatCount));
  std::vector<float> buf(static_cast<std::size_t>(plane));
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < plane; ++i) buf[i] = static_cast<float>(gray.data()[b * plane + i]);
    for (double v : stat_vector(buf, tau_u, tau_o).as_array()) out.push_back(static_cast<T>(v));
  }
  return Tensor<T>({n, static_cast<std::int64_t>(kStatCount)}, std::move(out));
}

template SobelResult<float> sobel<float>(const Tensor<float>&);
template SobelResult<double> sobel<double>(const Tensor<double>&);
template Tensor<float> luminance<float>(const Tensor<float>&);
template Tensor<double> luminance<double>(const Tensor<double>&);
template Tensor<float> stat_rows<float>(const Tensor<float>&, double, double);
template Tensor<double> stat_rows<double>(const Tensor<double>&, double, double);

}  // namespace expx
