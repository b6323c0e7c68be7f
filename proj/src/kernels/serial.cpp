// Reference kernels: direct loops, no tiling, no threads.

#include <algorithm>

#include "expx/kernels.hpp"

namespace expx::kernels::serial {
namespace {

template <typename T>
void conv_fwd(const ConvGeom& g, const T* in, const T* weight, const T* bias, T* out) {
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_ch; ++co)
      for (std::int64_t oh = 0; oh < g.out_h; ++oh)
        for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
          T acc = bias ? bias[co] : T(0);
          for (std::int64_t ci = 0; ci < g.in_ch; ++ci)
            for (std::int64_t kh = 0; kh < g.kernel; ++kh)
              for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
                const std::int64_t ih = oh * g.stride - g.pad + kh;
                const std::int64_t iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                acc += weight[((co * g.in_ch + ci) * g.kernel + kh) * g.kernel + kw] *
                       in[((n * g.in_ch + ci) * g.in_h + ih) * g.in_w + iw];
              }
          out[((n * g.out_ch + co) * g.out_h + oh) * g.out_w + ow] = acc;
        }
}

template <typename T>
void conv_bwd_in(const ConvGeom& g, const T* gout, const T* weight, T* gin) {
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_ch; ++co)
      for (std::int64_t oh = 0; oh < g.out_h; ++oh)
        for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
          const T go = gout[((n * g.out_ch + co) * g.out_h + oh) * g.out_w + ow];
          for (std::int64_t ci = 0; ci < g.in_ch; ++ci)
            for (std::int64_t kh = 0; kh < g.kernel; ++kh)
              for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
                const std::int64_t ih = oh * g.stride - g.pad + kh;
                const std::int64_t iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                gin[((n * g.in_ch + ci) * g.in_h + ih) * g.in_w + iw] +=
                    go * weight[((co * g.in_ch + ci) * g.kernel + kh) * g.kernel + kw];
              }
        }
}

template <typename T>
void conv_bwd_w(const ConvGeom& g, const T* gout, const T* in, T* gw, T* gb) {
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t co = 0; co < g.out_ch; ++co)
      for (std::int64_t oh = 0; oh < g.out_h; ++oh)
        for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
          const T go = gout[((n * g.out_ch + co) * g.out_h + oh) * g.out_w + ow];
          if (gb) gb[co] += go;
          for (std::int64_t ci = 0; ci < g.in_ch; ++ci)
            for (std::int64_t kh = 0; kh < g.kernel; ++kh)
              for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
                const std::int64_t ih = oh * g.stride - g.pad + kh;
                const std::int64_t iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                gw[((co * g.in_ch + ci) * g.kernel + kh) * g.kernel + kw] +=
                    go * in[((n * g.in_ch + ci) * g.in_h + ih) * g.in_w + iw];
              }
        }
}

template <typename T>
void min_filt(const MinFilterGeom& g, const T* src, T* dst, std::int32_t* argmin) {
  for (std::int64_t y = 0; y < g.h; ++y)
    for (std::int64_t x = 0; x < g.w; ++x) {
      T best = src[y * g.w + x];
      std::int64_t best_idx = -1;
      for (std::int64_t dy = -g.lo; dy <= g.hi; ++dy)
        for (std::int64_t dx = -g.lo; dx <= g.hi; ++dx) {
          const std::int64_t sy = std::clamp<std::int64_t>(y + dy, 0, g.h - 1);
          const std::int64_t sx = std::clamp<std::int64_t>(x + dx, 0, g.w - 1);
          const T v = src[sy * g.w + sx];
          if (best_idx < 0 || v < best) {
            best = v;
            best_idx = sy * g.w + sx;
          }
        }
      dst[y * g.w + x] = best;
      if (argmin) argmin[y * g.w + x] = static_cast<std::int32_t>(best_idx);
    }
}

}  // namespace

#define EXPX_SERIAL_IMPL(T)                                                                     \
  void conv2d_forward(const ConvGeom& g, const T* in, const T* w, const T* b, T* out) {         \
    conv_fwd(g, in, w, b, out);                                                                 \
  }                                                                                             \
  void conv2d_backward_input(const ConvGeom& g, const T* go, const T* w, T* gi) {              \
    conv_bwd_in(g, go, w, gi);                                                                  \
  }                                                                                             \
  void conv2d_backward_weight(const ConvGeom& g, const T* go, const T* in, T* gw, T* gb) {     \
    conv_bwd_w(g, go, in, gw, gb);                                                              \
  }                                                                                             \
  void min_filter(const MinFilterGeom& g, const T* src, T* dst, std::int32_t* am) {            \
    min_filt(g, src, dst, am);                                                                  \
  }

EXPX_SERIAL_IMPL(float)
EXPX_SERIAL_IMPL(double)

}  // namespace expx::kernels::serial
