#include <atomic>

#include "expx/error.hpp"
#include "expx/kernels.hpp"

namespace expx::kernels {
namespace {
std::atomic<Mode> g_mode{Mode::Parallel};
}

Mode mode() { return g_mode.load(std::memory_order_relaxed); }
void set_mode(Mode m) { g_mode.store(m, std::memory_order_relaxed); }

ConvGeom make_conv_geom(std::int64_t batch, std::int64_t in_ch, std::int64_t in_h,
                        std::int64_t in_w, std::int64_t out_ch, std::int64_t kernel,
                        std::int64_t stride, std::int64_t pad) {
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (kernel < 1) throw ShapeError("conv2d: kernel extent must be >= 1");
  const std::int64_t oh = (in_h + 2 * pad - kernel) / stride + 1;
  const std::int64_t ow = (in_w + 2 * pad - kernel) / stride + 1;
  if (in_h + 2 * pad < kernel || oh < 1)
    throw ShapeError("conv2d: input height (dim 2) = " + std::to_string(in_h) +
                     " too small for kernel " + std::to_string(kernel));
  if (in_w + 2 * pad < kernel || ow < 1)
    throw ShapeError("conv2d: input width (dim 3) = " + std::to_string(in_w) +
                     " too small for kernel " + std::to_string(kernel));
  return {batch, in_ch, in_h, in_w, out_ch, kernel, stride, pad, oh, ow};
}

#define EXPX_DISPATCH(T)                                                                        \
  void conv2d_forward(const ConvGeom& g, const T* in, const T* w, const T* b, T* out) {         \
    if (mode() == Mode::Serial)                                                                 \
      serial::conv2d_forward(g, in, w, b, out);                                                 \
    else                                                                                        \
      parallel::conv2d_forward(g, in, w, b, out);                                               \
  }                                                                                             \
  void conv2d_backward_input(const ConvGeom& g, const T* go, const T* w, T* gi) {              \
    if (mode() == Mode::Serial)                                                                 \
      serial::conv2d_backward_input(g, go, w, gi);                                              \
    else                                                                                        \
      parallel::conv2d_backward_input(g, go, w, gi);                                            \
  }                                                                                             \
  void conv2d_backward_weight(const ConvGeom& g, const T* go, const T* in, T* gw, T* gb) {     \
    if (mode() == Mode::Serial)                                                                 \
      serial::conv2d_backward_weight(g, go, in, gw, gb);                                        \
    else                                                                                        \
      parallel::conv2d_backward_weight(g, go, in, gw, gb);                                      \
  }                                                                                             \
  void min_filter(const MinFilterGeom& g, const T* src, T* dst, std::int32_t* am) {            \
    if (mode() == Mode::Serial)                                                                 \
      serial::min_filter(g, src, dst, am);                                                      \
    else                                                                                        \
      parallel::min_filter(g, src, dst, am);                                                    \
  }

EXPX_DISPATCH(float)
EXPX_DISPATCH(double)

}  // namespace expx::kernels
