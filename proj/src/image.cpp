#include "expx/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "expx/detail/bilinear.hpp"

namespace expx {

Image::Image(std::int64_t h, std::int64_t w, float fill) : height(h), width(w) {
  if (h < 1 || w < 1) throw ShapeError("image: height and width must be >= 1");
  pixels.assign(static_cast<std::size_t>(3 * h * w), fill);
}

GrayImage::GrayImage(std::int64_t h, std::int64_t w, float fill) : height(h), width(w) {
  if (h < 1 || w < 1) throw ShapeError("gray image: height and width must be >= 1");
  pixels.assign(static_cast<std::size_t>(h * w), fill);
}

std::uint8_t quantize(float v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Image from_interleaved(std::int64_t h, std::int64_t w, const std::uint8_t* rgb) {
  Image img(h, w);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[(y * w + x) * 3 + c] / 255.0f;
  return img;
}

std::vector<std::uint8_t> to_interleaved(const Image& img) {
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(3 * img.plane()));
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) rgb[(y * img.width + x) * 3 + c] = quantize(img.at(c, y, x));
  return rgb;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw FormatError(std::string("png: ") + png.message);
  const auto fmt = png.format;
  const bool color = fmt & PNG_FORMAT_FLAG_COLOR;
  const bool alpha = fmt & PNG_FORMAT_FLAG_ALPHA;
  const bool linear16 = fmt & PNG_FORMAT_FLAG_LINEAR;
  if (!color || alpha) {
    png_image_free(&png);
    throw FormatError("png: expected 3-channel RGB, got " +
                      std::to_string(PNG_IMAGE_SAMPLE_CHANNELS(fmt)) + " channel(s)");
  }
  if (linear16) {
    png_image_free(&png);
    throw FormatError("png: 16-bit images are not supported");
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("png: " + msg);
  }
  return from_interleaved(png.height, png.width, buf.data());
}

void write_png(const std::filesystem::path& path, const Image& img) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  const auto rgb = to_interleaved(img);
  if (!png_image_write_to_file(&png, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw IoError("png: cannot write " + path.string() + ": " + png.message);
}

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
      throw FormatError(std::string("ppm: truncated header (") + what + ")");
    std::int64_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1 << 24)) throw FormatError(std::string("ppm: ") + what + " too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError("ppm: missing magic");
  if (bytes[1] == '5' || bytes[1] == '2')
    throw FormatError("ppm: expected 3-channel RGB, got a 1-channel graymap");
  if (bytes[1] != '6') throw FormatError("ppm: only binary P6 is supported");
  pos = 2;
  const auto w = read_int("width");
  const auto h = read_int("height");
  const auto maxval = read_int("maxval");
  if (w < 1 || h < 1) throw FormatError("ppm: zero extent");
  if (maxval != 255) throw FormatError("ppm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("ppm: truncated header");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(3 * w * h);
  if (bytes.size() - pos < need)
    throw FormatError("ppm: truncated pixel data (" + std::to_string(bytes.size() - pos) + " of " +
                      std::to_string(need) + " bytes)");
  return from_interleaved(h, w, bytes.data() + pos);
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto rgb = to_interleaved(img);
  out.insert(out.end(), rgb.begin(), rgb.end());
  return out;
}

Image load_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin()))
    return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_ppm(bytes);
  throw FormatError("unsupported image format: " + path.string());
}

void save_image(const std::filesystem::path& path, const Image& img) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") {
    write_png(path, img);
    return;
  }
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

GrayImage to_gray(const Image& img) {
  GrayImage g(img.height, img.width);
  const auto r = img.channel(0), gr = img.channel(1), b = img.channel(2);
  for (std::size_t i = 0; i < g.pixels.size(); ++i)
    g.pixels[i] = std::clamp(kLumaR * r[i] + kLumaG * gr[i] + kLumaB * b[i], 0.0f, 1.0f);
  return g;
}

Image resize(const Image& img, std::int64_t h, std::int64_t w) {
  if (h < 1 || w < 1) throw ShapeError("resize: target extent must be >= 1");
  if (h == img.height && w == img.width) return img;
  const auto ty = detail::bilinear_taps(img.height, h);
  const auto tx = detail::bilinear_taps(img.width, w);
  Image out(h, w);
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y) {
      const double fy = ty.frac[y];
      for (std::int64_t x = 0; x < w; ++x) {
        const double fx = tx.frac[x];
        const double a = img.at(c, ty.i0[y], tx.i0[x]), b = img.at(c, ty.i0[y], tx.i1[x]);
        const double cc = img.at(c, ty.i1[y], tx.i0[x]), d = img.at(c, ty.i1[y], tx.i1[x]);
        const double top = a + fx * (b - a), bot = cc + fx * (d - cc);
        out.at(c, y, x) = static_cast<float>(top + fy * (bot - top));
      }
    }
  return out;
}

Image clamp01(Image img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

template <typename T>
Tensor<T> to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("to_tensor: no images");
  const auto h = images[0].height, w = images[0].width;
  std::vector<T> v;
  v.reserve(images.size() * 3 * h * w);
  for (const auto& img : images) {
    if (img.height != h || img.width != w)
      throw ShapeError("to_tensor: image sizes differ in batch");
    v.insert(v.end(), img.pixels.begin(), img.pixels.end());
  }
  return Tensor<T>({static_cast<std::int64_t>(images.size()), 3, h, w}, std::move(v));
}

template <typename T>
Tensor<T> to_tensor(const GrayImage& image) {
  return Tensor<T>({1, 1, image.height, image.width},
                   std::vector<T>(image.pixels.begin(), image.pixels.end()));
}

template <typename T>
Image image_from_tensor(const Tensor<T>& t, std::int64_t n) {
  if (t.ndim() != 4 || t.dim(1) != 3)
    throw ShapeError("image_from_tensor: expected [N,3,H,W], got " + shape_str(t.shape()));
  if (n < 0 || n >= t.dim(0)) throw ShapeError("image_from_tensor: sample index out of range");
  Image img(t.dim(2), t.dim(3));
  const auto d = t.data();
  const auto size = static_cast<std::int64_t>(img.pixels.size());
  for (std::int64_t i = 0; i < size; ++i) img.pixels[i] = static_cast<float>(d[n * size + i]);
  return img;
}

template Tensor<float> to_tensor<float>(std::span<const Image>);
template Tensor<double> to_tensor<double>(std::span<const Image>);
template Tensor<float> to_tensor<float>(const GrayImage&);
template Tensor<double> to_tensor<double>(const GrayImage&);
template Image image_from_tensor<float>(const Tensor<float>&, std::int64_t);
template Image image_from_tensor<double>(const Tensor<double>&, std::int64_t);

}  // namespace expx
