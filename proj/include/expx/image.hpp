#pragma once

// RGB and grayscale images with intensities in [0,1]. Pixels are stored
// channel-planar (all R, then all G, then all B), row-major within a plane.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "expx/tensor.hpp"

namespace expx {

struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> pixels;  // 3 * height * width

  Image() = default;
  Image(std::int64_t h, std::int64_t w, float fill = 0.0f);

  std::int64_t plane() const { return height * width; }
  float& at(int c, std::int64_t y, std::int64_t x) { return pixels[(c * height + y) * width + x]; }
  float at(int c, std::int64_t y, std::int64_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  std::span<const float> channel(int c) const {
    return std::span<const float>(pixels).subspan(static_cast<std::size_t>(c * plane()),
                                                  static_cast<std::size_t>(plane()));
  }
};

struct GrayImage {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> pixels;  // height * width

  GrayImage() = default;
  GrayImage(std::int64_t h, std::int64_t w, float fill = 0.0f);

  float& at(std::int64_t y, std::int64_t x) { return pixels[y * width + x]; }
  float at(std::int64_t y, std::int64_t x) const { return pixels[y * width + x]; }
};

inline constexpr float kLumaR = 0.2989f;
inline constexpr float kLumaG = 0.5870f;
inline constexpr float kLumaB = 0.1140f;

// Format is chosen by content (PNG signature or "P6"). Only 8-bit RGB is
// accepted; bytes map to intensities by /255.
Image load_image(const std::filesystem::path& path);
// Format is chosen by extension (.png, else binary PPM). Intensities are
// clamped to [0,1] and quantized with round-half-up.
void save_image(const std::filesystem::path& path, const Image& img);

Image decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const Image& img);

std::uint8_t quantize(float v);

// 0.2989 R + 0.5870 G + 0.1140 B, clamped to [0,1]. The weights sum to
// 0.9999 and are not renormalized.
GrayImage to_gray(const Image& img);

// Bilinear, align_corners = false.
Image resize(const Image& img, std::int64_t h, std::int64_t w);

Image clamp01(Image img);

// Stacks same-size images into [N,3,H,W].
template <typename T>
Tensor<T> to_tensor(std::span<const Image> images);
template <typename T>
Tensor<T> to_tensor(const Image& image) {
  return to_tensor<T>(std::span<const Image>(&image, 1));
}
// Gray image as [1,1,H,W].
template <typename T>
Tensor<T> to_tensor(const GrayImage& image);

// Extracts sample n of an [N,3,H,W] tensor.
template <typename T>
Image image_from_tensor(const Tensor<T>& t, std::int64_t n = 0);

}  // namespace expx
