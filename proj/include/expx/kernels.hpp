#pragma once

// Hot loops behind the tensor ops. Each kernel has a serial reference in
// `serial::` (plain loops, kept for testing and benchmarking) and an
// OpenMP version in `parallel::`. Parallel kernels split work so every
// output element is written by exactly one thread in a fixed order, which
// keeps results bit-identical across runs and thread counts.

#include <cstdint>

namespace expx::kernels {

enum class Mode { Serial, Parallel };

Mode mode();
void set_mode(Mode m);

class ModeGuard {
 public:
  explicit ModeGuard(Mode m) : prev_(mode()) { set_mode(m); }
  ~ModeGuard() { set_mode(prev_); }
  ModeGuard(const ModeGuard&) = delete;
  ModeGuard& operator=(const ModeGuard&) = delete;

 private:
  Mode prev_;
};

// Zero-padded 2-d cross-correlation, NCHW layout, square kernels.
struct ConvGeom {
  std::int64_t batch, in_ch, in_h, in_w;
  std::int64_t out_ch, kernel, stride, pad;
  std::int64_t out_h, out_w;
};

ConvGeom make_conv_geom(std::int64_t batch, std::int64_t in_ch, std::int64_t in_h,
                        std::int64_t in_w, std::int64_t out_ch, std::int64_t kernel,
                        std::int64_t stride, std::int64_t pad);

// Windowed minimum over a single plane with replicate borders. The window
// for pixel x spans [x - lo, x + hi] on each axis. `argmin` receives the flat
// index into `src` of the first minimum in row-major window scan order.
struct MinFilterGeom {
  std::int64_t h, w, lo, hi;
};

#define EXPX_KERNEL_DECLS(T)                                                              \
  void conv2d_forward(const ConvGeom& g, const T* in, const T* weight, const T* bias,     \
                      T* out);                                                            \
  void conv2d_backward_input(const ConvGeom& g, const T* grad_out, const T* weight,       \
                             T* grad_in);                                                 \
  void conv2d_backward_weight(const ConvGeom& g, const T* grad_out, const T* in,          \
                              T* grad_weight, T* grad_bias);                              \
  void min_filter(const MinFilterGeom& g, const T* src, T* dst, std::int32_t* argmin);

namespace serial {
EXPX_KERNEL_DECLS(float)
EXPX_KERNEL_DECLS(double)
}  // namespace serial

namespace parallel {
EXPX_KERNEL_DECLS(float)
EXPX_KERNEL_DECLS(double)
}  // namespace parallel

// Dispatch on the current mode. Gradient outputs are accumulated (+=).
EXPX_KERNEL_DECLS(float)
EXPX_KERNEL_DECLS(double)

#undef EXPX_KERNEL_DECLS

}  // namespace expx::kernels
