// OpenMP kernels. Work is partitioned by output plane (forward, input
// gradient) or by output channel (weight gradient), so no two threads touch
// the same output and each output is summed in a fixed order.

#include <algorithm>
#include <vector>

#include "expx/kernels.hpp"

namespace expx::kernels::parallel {
namespace {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}
inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

// Output columns whose tap kw lands inside the input row.
struct ColRange {
  std::int64_t begin, end;
};
inline ColRange col_range(const ConvGeom& g, std::int64_t kw) {
  const std::int64_t b = std::max<std::int64_t>(0, ceil_div(g.pad - kw, g.stride));
  const std::int64_t e =
      std::min<std::int64_t>(g.out_w, floor_div(g.in_w - 1 + g.pad - kw, g.stride) + 1);
  return {b, std::max(b, e)};
}

template <typename T>
void conv_fwd(const ConvGeom& g, const T* in, const T* weight, const T* bias, T* out) {
  const std::int64_t planes = g.batch * g.out_ch;
  const std::int64_t plane = g.out_h * g.out_w;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t n = p / g.out_ch;
    const std::int64_t co = p % g.out_ch;
    T* o = out + p * plane;
    std::fill(o, o + plane, bias ? bias[co] : T(0));
    for (std::int64_t ci = 0; ci < g.in_ch; ++ci) {
      const T* src = in + (n * g.in_ch + ci) * g.in_h * g.in_w;
      const T* wk = weight + (co * g.in_ch + ci) * g.kernel * g.kernel;
      for (std::int64_t kh = 0; kh < g.kernel; ++kh)
        for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
          const T w = wk[kh * g.kernel + kw];
          const ColRange cr = col_range(g, kw);
          const std::int64_t shift = kw - g.pad;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + kh;
            if (ih < 0 || ih >= g.in_h) continue;
            T* orow = o + oh * g.out_w;
            const T* irow = src + ih * g.in_w;
            if (g.stride == 1) {
              const T* ip = irow + shift;
#pragma omp simd
              for (std::int64_t ow = cr.begin; ow < cr.end; ++ow) orow[ow] += w * ip[ow];
            } else {
              for (std::int64_t ow = cr.begin; ow < cr.end; ++ow)
                orow[ow] += w * irow[ow * g.stride + shift];
            }
          }
        }
    }
  }
}

template <typename T>
void conv_bwd_in(const ConvGeom& g, const T* gout, const T* weight, T* gin) {
  const std::int64_t planes = g.batch * g.in_ch;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t n = p / g.in_ch;
    const std::int64_t ci = p % g.in_ch;
    T* dst = gin + p * g.in_h * g.in_w;
    for (std::int64_t co = 0; co < g.out_ch; ++co) {
      const T* go = gout + (n * g.out_ch + co) * g.out_h * g.out_w;
      const T* wk = weight + (co * g.in_ch + ci) * g.kernel * g.kernel;
      for (std::int64_t kh = 0; kh < g.kernel; ++kh)
        for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
          const T w = wk[kh * g.kernel + kw];
          const ColRange cr = col_range(g, kw);
          const std::int64_t shift = kw - g.pad;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + kh;
            if (ih < 0 || ih >= g.in_h) continue;
            const T* grow = go + oh * g.out_w;
            T* drow = dst + ih * g.in_w;
            if (g.stride == 1) {
              T* dp = drow + shift;
#pragma omp simd
              for (std::int64_t ow = cr.begin; ow < cr.end; ++ow) dp[ow] += w * grow[ow];
            } else {
              for (std::int64_t ow = cr.begin; ow < cr.end; ++ow)
                drow[ow * g.stride + shift] += w * grow[ow];
            }
          }
        }
    }
  }
}

template <typename T>
void conv_bwd_w(const ConvGeom& g, const T* gout, const T* in, T* gw, T* gb) {
#pragma omp parallel
  {
    // Per-column partial sums keep the inner loop free of a scalar
    // reduction, so it vectorizes without reassociation flags.
    std::vector<T> acc(static_cast<std::size_t>(g.out_w));
#pragma omp for schedule(static)
    for (std::int64_t co = 0; co < g.out_ch; ++co) {
      if (gb) {
        std::fill(acc.begin(), acc.end(), T(0));
        for (std::int64_t n = 0; n < g.batch; ++n) {
          const T* go = gout + (n * g.out_ch + co) * g.out_h * g.out_w;
          for (std::int64_t oh = 0; oh < g.out_h; ++oh)
            for (std::int64_t ow = 0; ow < g.out_w; ++ow) acc[ow] += go[oh * g.out_w + ow];
        }
        T s = 0;
        for (T v : acc) s += v;
        gb[co] += s;
      }
      for (std::int64_t ci = 0; ci < g.in_ch; ++ci)
        for (std::int64_t kh = 0; kh < g.kernel; ++kh)
          for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
            std::fill(acc.begin(), acc.end(), T(0));
            const ColRange cr = col_range(g, kw);
            const std::int64_t shift = kw - g.pad;
            for (std::int64_t n = 0; n < g.batch; ++n) {
              const T* go = gout + (n * g.out_ch + co) * g.out_h * g.out_w;
              const T* src = in + (n * g.in_ch + ci) * g.in_h * g.in_w;
              for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
                const std::int64_t ih = oh * g.stride - g.pad + kh;
                if (ih < 0 || ih >= g.in_h) continue;
                const T* grow = go + oh * g.out_w;
                const T* irow = src + ih * g.in_w;
                if (g.stride == 1) {
                  const T* ip = irow + shift;
#pragma omp simd
                  for (std::int64_t ow = cr.begin; ow < cr.end; ++ow) acc[ow] += grow[ow] * ip[ow];
                } else {
                  for (std::int64_t ow = cr.begin; ow < cr.end; ++ow)
                    acc[ow] += grow[ow] * irow[ow * g.stride + shift];
                }
              }
            }
            T s = 0;
            for (T v : acc) s += v;
            gw[((co * g.in_ch + ci) * g.kernel + kh) * g.kernel + kw] += s;
          }
    }
  }
}

// Separable min: a horizontal pass records each row's first minimum, then a
// vertical pass keeps the first row holding the overall minimum. Together
// they reproduce the row-major first-argmin of the full 2-d window.
template <typename T>
void min_filt(const MinFilterGeom& g, const T* src, T* dst, std::int32_t* argmin) {
  std::vector<T> hval(static_cast<std::size_t>(g.h * g.w));
  std::vector<std::int32_t> hidx(static_cast<std::size_t>(g.h * g.w));
#pragma omp parallel for schedule(static)
  for (std::int64_t y = 0; y < g.h; ++y) {
    const T* row = src + y * g.w;
    for (std::int64_t x = 0; x < g.w; ++x) {
      const std::int64_t x0 = std::max<std::int64_t>(0, x - g.lo);
      const std::int64_t x1 = std::min<std::int64_t>(g.w - 1, x + g.hi);
      std::int64_t best = x0;
      for (std::int64_t sx = x0 + 1; sx <= x1; ++sx)
        if (row[sx] < row[best]) best = sx;
      hval[y * g.w + x] = row[best];
      hidx[y * g.w + x] = static_cast<std::int32_t>(y * g.w + best);
    }
  }
#pragma omp parallel for schedule(static)
  for (std::int64_t y = 0; y < g.h; ++y) {
    const std::int64_t y0 = std::max<std::int64_t>(0, y - g.lo);
    const std::int64_t y1 = std::min<std::int64_t>(g.h - 1, y + g.hi);
    for (std::int64_t x = 0; x < g.w; ++x) {
      std::int64_t best = y0;
      for (std::int64_t sy = y0 + 1; sy <= y1; ++sy)
        if (hval[sy * g.w + x] < hval[best * g.w + x]) best = sy;
      dst[y * g.w + x] = hval[best * g.w + x];
      if (argmin) argmin[y * g.w + x] = hidx[best * g.w + x];
    }
  }
}

}  // namespace

#define EXPX_PARALLEL_IMPL(T)                                                                   \
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

EXPX_PARALLEL_IMPL(float)
EXPX_PARALLEL_IMPL(double)

}  // namespace expx::kernels::parallel
