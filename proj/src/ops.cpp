#include "expx/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "expx/detail/bilinear.hpp"
#include "expx/kernels.hpp"

namespace expx::ops {
namespace {

using I64 = std::int64_t;

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (const T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": produced a non-finite value");
}

// Builds the result node, attaching the backward closure only when some
// input needs a gradient and recording is enabled.
template <typename T>
Tensor<T> record(const char* op, Shape shape, std::vector<T> data,
                 std::initializer_list<const Tensor<T>*> inputs,
                 std::function<void(const std::vector<T>&)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<detail::Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled()) {
    for (const Tensor<T>* in : inputs)
      if (in && in->defined() && in->requires_grad()) node->parents.push_back(in->node());
    if (!node->parents.empty()) {
      node->requires_grad = true;
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

// Gradient buffer of t, or nullptr when t takes no gradient.
template <typename T>
T* grad_ptr(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->grad_buffer().data();
}

template <typename T>
void same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != b.ndim())
    throw ShapeError(std::string(op) + ": rank " + std::to_string(a.ndim()) + " vs " +
                     std::to_string(b.ndim()));
  for (std::size_t i = 0; i < a.ndim(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError(std::string(op) + ": dim " + std::to_string(i) + " is " +
                       std::to_string(a.dim(i)) + " vs " + std::to_string(b.dim(i)));
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank, const char* what) {
  if (a.ndim() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(a.shape()));
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, DF df) {
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return record<T>(op, a.shape(), std::move(out), {&a}, [a, df](const std::vector<T>& g) {
    T* ga = grad_ptr(a);
    const auto x = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i]);
  });
}

thread_local BranchTrace* g_trace = nullptr;

template <typename T, typename C>
void trace_branches(const Tensor<T>& a, C classify) {
  if (!g_trace) return;
  for (const T v : a.data()) g_trace->note(classify(v));
}

}  // namespace

BranchTrace::BranchTrace() : prev_(g_trace) { g_trace = this; }
BranchTrace::~BranchTrace() { g_trace = prev_; }
BranchTrace* BranchTrace::active() { return g_trace; }

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  same_shape("add", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return record<T>("add", a.shape(), std::move(out), {&a, &b}, [a, b](const std::vector<T>& g) {
    if (T* ga = grad_ptr(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = grad_ptr(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  same_shape("sub", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return record<T>("sub", a.shape(), std::move(out), {&a, &b}, [a, b](const std::vector<T>& g) {
    if (T* ga = grad_ptr(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = grad_ptr(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  same_shape("mul", a, b);
  const auto x = a.data(), y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return record<T>("mul", a.shape(), std::move(out), {&a, &b}, [a, b](const std::vector<T>& g) {
    const auto x = a.data(), y = b.data();
    if (T* ga = grad_ptr(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    if (T* gb = grad_ptr(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary("scale", a, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary("add_scalar", a, [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  trace_branches(a, [](T v) { return static_cast<std::uint64_t>(v > 0) + 2 * (v < 0); });
  return unary(
      "abs", a, [](T v) { return std::abs(v); },
      [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary("square", a, [](T v) { return v * v; }, [](T v) { return 2 * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (const T v : a.data())
    if (v < 0) throw NumericError("sqrt: negative operand");
  return unary(
      "sqrt", a, [](T v) { return std::sqrt(v); },
      [](T v) { return v > 0 ? T(0.5) / std::sqrt(v) : T(0); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  trace_branches(a, [](T v) { return static_cast<std::uint64_t>(v > 0); });
  return unary(
      "relu", a, [](T v) { return v > 0 ? v : T(0); }, [](T v) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto f = [](T v) { return T(1) / (T(1) + std::exp(-v)); };
  return unary("sigmoid", a, f, [f](T v) {
    const T s = f(v);
    return s * (T(1) - s);
  });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  trace_branches(a, [lo, hi](T v) { return static_cast<std::uint64_t>(v < lo) + 2 * (v > hi); });
  return unary(
      "clamp", a, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  for (const T v : a.data()) acc += v;
  return record<T>("sum", Shape{1}, {static_cast<T>(acc)}, {&a}, [a](const std::vector<T>& g) {
    T* ga = grad_ptr(a);
    for (I64 i = 0; i < a.numel(); ++i) ga[i] += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0;
  for (const T v : a.data()) acc += v;
  const T n = static_cast<T>(a.numel());
  return record<T>("mean", Shape{1}, {static_cast<T>(acc / a.numel())}, {&a},
                   [a, n](const std::vector<T>& g) {
                     T* ga = grad_ptr(a);
                     const T d = g[0] / n;
                     for (I64 i = 0; i < a.numel(); ++i) ga[i] += d;
                   });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return record<T>("reshape", std::move(shape), std::move(out), {&a},
                   [a](const std::vector<T>& g) {
                     T* ga = grad_ptr(a);
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, I64 start, I64 length) {
  if (axis >= a.ndim()) throw ShapeError("narrow: axis out of range");
  if (start < 0 || length < 0 || start + length > a.dim(axis))
    throw ShapeError("narrow: range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") exceeds dim " + std::to_string(axis) +
                     " = " + std::to_string(a.dim(axis)));
  I64 outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  const I64 extent = a.dim(axis);
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<T> out(static_cast<std::size_t>(outer * length * inner));
  const auto x = a.data();
  for (I64 o = 0; o < outer; ++o)
    std::copy_n(x.begin() + (o * extent + start) * inner, length * inner,
                out.begin() + o * length * inner);
  return record<T>("narrow", std::move(shape), std::move(out), {&a},
                   [=](const std::vector<T>& g) {
                     T* ga = grad_ptr(a);
                     for (I64 o = 0; o < outer; ++o)
                       for (I64 i = 0; i < length * inner; ++i)
                         ga[(o * extent + start) * inner + i] += g[o * length * inner + i];
                   });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor<T>& first = parts.front();
  if (axis >= first.ndim()) throw ShapeError("concat: axis out of range");
  Shape shape = first.shape();
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != first.ndim()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < p.ndim(); ++i)
      if (i != axis && p.dim(i) != first.dim(i))
        throw ShapeError("concat: dim " + std::to_string(i) + " is " + std::to_string(p.dim(i)) +
                         " vs " + std::to_string(first.dim(i)));
    shape[axis] += p.dim(axis);
  }
  I64 outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first.dim(i);
  for (std::size_t i = axis + 1; i < first.ndim(); ++i) inner *= first.dim(i);
  const I64 total = shape[axis];
  std::vector<T> out(static_cast<std::size_t>(shape_numel(shape)));
  std::vector<I64> offsets;
  I64 off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const I64 chunk = p.dim(axis) * inner;
    const auto x = p.data();
    for (I64 o = 0; o < outer; ++o)
      std::copy_n(x.begin() + o * chunk, chunk, out.begin() + (o * total + off) * inner);
    off += p.dim(axis);
  }
  auto node = std::make_shared<detail::Node<T>>();
  check_finite("concat", out);
  node->op = "concat";
  node->shape = std::move(shape);
  node->data = std::move(out);
  if (grad_enabled()) {
    for (const auto& p : parts)
      if (p.requires_grad()) node->parents.push_back(p.node());
    if (!node->parents.empty()) {
      node->requires_grad = true;
      node->backward = [parts, offsets, outer, inner, total, axis](const std::vector<T>& g) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          T* gp = grad_ptr(parts[k]);
          if (!gp) continue;
          const I64 chunk = parts[k].dim(axis) * inner;
          for (I64 o = 0; o < outer; ++o)
            for (I64 i = 0; i < chunk; ++i) gp[o * chunk + i] += g[(o * total + offsets[k]) * inner + i];
        }
      };
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", x, 2, "input");
  require_rank("linear", weight, 2, "weight");
  const I64 n = x.dim(0), in = x.dim(1), outd = weight.dim(0);
  if (weight.dim(1) != in)
    throw ShapeError("linear: input features (dim 1) = " + std::to_string(in) +
                     " but weight expects " + std::to_string(weight.dim(1)));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != outd))
    throw ShapeError("linear: bias must have shape [" + std::to_string(outd) + "]");
  const auto xv = x.data(), wv = weight.data();
  std::vector<T> out(static_cast<std::size_t>(n * outd));
  for (I64 r = 0; r < n; ++r)
    for (I64 o = 0; o < outd; ++o) {
      T acc = bias.defined() ? bias.data()[o] : T(0);
      for (I64 i = 0; i < in; ++i) acc += xv[r * in + i] * wv[o * in + i];
      out[r * outd + o] = acc;
    }
  return record<T>("linear", Shape{n, outd}, std::move(out), {&x, &weight, &bias},
                   [=](const std::vector<T>& g) {
                     const auto xv = x.data(), wv = weight.data();
                     if (T* gx = grad_ptr(x))
                       for (I64 r = 0; r < n; ++r)
                         for (I64 o = 0; o < outd; ++o)
                           for (I64 i = 0; i < in; ++i)
                             gx[r * in + i] += g[r * outd + o] * wv[o * in + i];
                     if (T* gw = grad_ptr(weight))
                       for (I64 r = 0; r < n; ++r)
                         for (I64 o = 0; o < outd; ++o)
                           for (I64 i = 0; i < in; ++i)
                             gw[o * in + i] += g[r * outd + o] * xv[r * in + i];
                     if (T* gb = grad_ptr(bias))
                       for (I64 r = 0; r < n; ++r)
                         for (I64 o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
                   });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  if (a.ndim() != b.ndim() || (a.ndim() != 2 && a.ndim() != 3))
    throw ShapeError("matmul: operands must both be rank 2 or rank 3");
  const bool batched = a.ndim() == 3;
  const I64 batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) throw ShapeError("matmul: batch (dim 0) mismatch");
  const std::size_t r0 = batched ? 1 : 0;
  const I64 m = trans_a ? a.dim(r0 + 1) : a.dim(r0);
  const I64 k = trans_a ? a.dim(r0) : a.dim(r0 + 1);
  const I64 kb = trans_b ? b.dim(r0 + 1) : b.dim(r0);
  const I64 nn = trans_b ? b.dim(r0) : b.dim(r0 + 1);
  if (k != kb)
    throw ShapeError("matmul: inner extents differ (" + std::to_string(k) + " vs " +
                     std::to_string(kb) + ")");
  auto ai = [=](I64 i, I64 j) { return trans_a ? j * m + i : i * k + j; };  // a(i,j), i<m, j<k
  auto bi = [=](I64 i, I64 j) { return trans_b ? j * k + i : i * nn + j; };  // b(i,j), i<k, j<n
  const auto av = a.data(), bv = b.data();
  std::vector<T> out(static_cast<std::size_t>(batch * m * nn), T(0));
  for (I64 s = 0; s < batch; ++s) {
    const T* A = av.data() + s * m * k;
    const T* B = bv.data() + s * k * nn;
    T* C = out.data() + s * m * nn;
    for (I64 i = 0; i < m; ++i)
      for (I64 p = 0; p < k; ++p) {
        const T aip = A[ai(i, p)];
        for (I64 j = 0; j < nn; ++j) C[i * nn + j] += aip * B[bi(p, j)];
      }
  }
  Shape shape = batched ? Shape{batch, m, nn} : Shape{m, nn};
  return record<T>("matmul", std::move(shape), std::move(out), {&a, &b},
                   [=](const std::vector<T>& g) {
                     const auto av = a.data(), bv = b.data();
                     T* ga = grad_ptr(a);
                     T* gb = grad_ptr(b);
                     for (I64 s = 0; s < batch; ++s) {
                       const T* A = av.data() + s * m * k;
                       const T* B = bv.data() + s * k * nn;
                       const T* G = g.data() + s * m * nn;
                       if (ga)
                         for (I64 i = 0; i < m; ++i)
                           for (I64 p = 0; p < k; ++p) {
                             T acc = 0;
                             for (I64 j = 0; j < nn; ++j) acc += G[i * nn + j] * B[bi(p, j)];
                             ga[s * m * k + ai(i, p)] += acc;
                           }
                       if (gb)
                         for (I64 p = 0; p < k; ++p)
                           for (I64 j = 0; j < nn; ++j) {
                             T acc = 0;
                             for (I64 i = 0; i < m; ++i) acc += A[ai(i, p)] * G[i * nn + j];
                             gb[s * k * nn + bi(p, j)] += acc;
                           }
                     }
                   });
}

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& a) {
  if (a.ndim() == 0) throw ShapeError("softmax_last: rank 0");
  const I64 len = a.dim(a.ndim() - 1);
  const I64 rows = len ? a.numel() / len : 0;
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (I64 r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * len;
    T* yr = out.data() + r * len;
    const T mx = *std::max_element(xr, xr + len);
    T s = 0;
    for (I64 j = 0; j < len; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (I64 j = 0; j < len; ++j) yr[j] /= s;
  }
  std::vector<T> y = out;
  return record<T>("softmax_last", a.shape(), std::move(out), {&a},
                   [a, y = std::move(y), rows, len](const std::vector<T>& g) {
                     T* ga = grad_ptr(a);
                     for (I64 r = 0; r < rows; ++r) {
                       T dot = 0;
                       for (I64 j = 0; j < len; ++j) dot += g[r * len + j] * y[r * len + j];
                       for (I64 j = 0; j < len; ++j)
                         ga[r * len + j] += y[r * len + j] * (g[r * len + j] - dot);
                     }
                   });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 I64 stride, I64 padding) {
  require_rank("conv2d", input, 4, "input");
  require_rank("conv2d", weight, 4, "weight");
  if (weight.dim(1) != input.dim(1))
    throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(input.dim(1)) +
                     " but weight expects " + std::to_string(weight.dim(1)));
  if (weight.dim(2) != weight.dim(3))
    throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0)))
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(weight.dim(0)) + "]");
  const auto g = kernels::make_conv_geom(input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                                         weight.dim(0), weight.dim(2), stride, padding);
  std::vector<T> out(static_cast<std::size_t>(g.batch * g.out_ch * g.out_h * g.out_w));
  kernels::conv2d_forward(g, input.data().data(), weight.data().data(),
                          bias.defined() ? bias.data().data() : nullptr, out.data());
  return record<T>("conv2d", Shape{g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out),
                   {&input, &weight, &bias}, [=](const std::vector<T>& go) {
                     if (T* gi = grad_ptr(input))
                       kernels::conv2d_backward_input(g, go.data(), weight.data().data(), gi);
                     T* gw = grad_ptr(weight);
                     T* gb = grad_ptr(bias);
                     if (gw) {
                       kernels::conv2d_backward_weight(g, go.data(), input.data().data(), gw, gb);
                     } else if (gb) {
                       const I64 plane = g.out_h * g.out_w;
                       for (I64 n = 0; n < g.batch; ++n)
                         for (I64 c = 0; c < g.out_ch; ++c)
                           for (I64 p = 0; p < plane; ++p)
                             gb[c] += go[(n * g.out_ch + c) * plane + p];
                     }
                   });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, T eps) {
  require_rank("instance_norm", input, 4, "input");
  const I64 slices = input.dim(0) * input.dim(1);
  const I64 plane = input.dim(2) * input.dim(3);
  if (plane < 1) throw ShapeError("instance_norm: empty spatial extent");
  const auto x = input.data();
  std::vector<T> out(x.size());
  std::vector<T> inv_std(static_cast<std::size_t>(slices));
  for (I64 s = 0; s < slices; ++s) {
    const T* xs = x.data() + s * plane;
    double mu = 0;
    for (I64 i = 0; i < plane; ++i) mu += xs[i];
    mu /= plane;
    double var = 0;
    for (I64 i = 0; i < plane; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    var /= plane;
    const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
    inv_std[s] = is;
    for (I64 i = 0; i < plane; ++i) out[s * plane + i] = (xs[i] - static_cast<T>(mu)) * is;
  }
  std::vector<T> y = out;
  return record<T>("instance_norm", input.shape(), std::move(out), {&input},
                   [input, y = std::move(y), inv_std = std::move(inv_std), slices,
                    plane](const std::vector<T>& g) {
                     T* gi = grad_ptr(input);
                     for (I64 s = 0; s < slices; ++s) {
                       const T* gs = g.data() + s * plane;
                       const T* ys = y.data() + s * plane;
                       double mg = 0, mgy = 0;
                       for (I64 i = 0; i < plane; ++i) {
                         mg += gs[i];
                         mgy += gs[i] * ys[i];
                       }
                       mg /= plane;
                       mgy /= plane;
                       for (I64 i = 0; i < plane; ++i)
                         gi[s * plane + i] +=
                             inv_std[s] * (gs[i] - static_cast<T>(mg) - ys[i] * static_cast<T>(mgy));
                     }
                   });
}

template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& input, I64 out_h, I64 out_w) {
  require_rank("adaptive_avg_pool2d", input, 4, "input");
  if (out_h < 1 || out_w < 1) throw ShapeError("adaptive_avg_pool2d: zero output extent");
  const I64 slices = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h > h) throw ShapeError("adaptive_avg_pool2d: output height exceeds input (dim 2)");
  if (out_w > w) throw ShapeError("adaptive_avg_pool2d: output width exceeds input (dim 3)");
  auto lo = [](I64 i, I64 in, I64 out) { return (i * in) / out; };
  auto hi = [](I64 i, I64 in, I64 out) { return ((i + 1) * in + out - 1) / out; };
  const auto x = input.data();
  std::vector<T> out(static_cast<std::size_t>(slices * out_h * out_w));
  for (I64 s = 0; s < slices; ++s)
    for (I64 oy = 0; oy < out_h; ++oy)
      for (I64 ox = 0; ox < out_w; ++ox) {
        const I64 y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
        const I64 x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
        T acc = 0;
        for (I64 y = y0; y < y1; ++y)
          for (I64 xx = x0; xx < x1; ++xx) acc += x[(s * h + y) * w + xx];
        out[(s * out_h + oy) * out_w + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
  Shape shape{input.dim(0), input.dim(1), out_h, out_w};
  return record<T>("adaptive_avg_pool2d", std::move(shape), std::move(out), {&input},
                   [=](const std::vector<T>& g) {
                     T* gi = grad_ptr(input);
                     for (I64 s = 0; s < slices; ++s)
                       for (I64 oy = 0; oy < out_h; ++oy)
                         for (I64 ox = 0; ox < out_w; ++ox) {
                           const I64 y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
                           const I64 x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
                           const T d = g[(s * out_h + oy) * out_w + ox] /
                                       static_cast<T>((y1 - y0) * (x1 - x0));
                           for (I64 y = y0; y < y1; ++y)
                             for (I64 xx = x0; xx < x1; ++xx) gi[(s * h + y) * w + xx] += d;
                         }
                   });
}


template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, I64 factor) {
  require_rank("upsample_bilinear", input, 4, "input");
  if (factor < 1) throw ShapeError("upsample_bilinear: factor must be >= 1");
  const I64 slices = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const I64 oh = h * factor, ow = w * factor;
  const auto ty = detail::bilinear_taps(h, oh), tx = detail::bilinear_taps(w, ow);
  const auto x = input.data();
  std::vector<T> out(static_cast<std::size_t>(slices * oh * ow));
  for (I64 s = 0; s < slices; ++s) {
    const T* src = x.data() + s * h * w;
    for (I64 oy = 0; oy < oh; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      const T* r0 = src + ty.i0[oy] * w;
      const T* r1 = src + ty.i1[oy] * w;
      for (I64 ox = 0; ox < ow; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const I64 a = tx.i0[ox], b = tx.i1[ox];
        const T top = r0[a] + fx * (r0[b] - r0[a]);
        const T bot = r1[a] + fx * (r1[b] - r1[a]);
        out[(s * oh + oy) * ow + ox] = top + fy * (bot - top);
      }
    }
  }
  Shape shape{input.dim(0), input.dim(1), oh, ow};
  return record<T>("upsample_bilinear", std::move(shape), std::move(out), {&input},
                   [=](const std::vector<T>& g) {
                     T* gi = grad_ptr(input);
                     for (I64 s = 0; s < slices; ++s) {
                       T* dst = gi + s * h * w;
                       for (I64 oy = 0; oy < oh; ++oy) {
                         const T fy = static_cast<T>(ty.frac[oy]);
                         for (I64 ox = 0; ox < ow; ++ox) {
                           const T fx = static_cast<T>(tx.frac[ox]);
                           const T go = g[(s * oh + oy) * ow + ox];
                           const I64 a = tx.i0[ox], b = tx.i1[ox];
                           dst[ty.i0[oy] * w + a] += go * (1 - fy) * (1 - fx);
                           dst[ty.i0[oy] * w + b] += go * (1 - fy) * fx;
                           dst[ty.i1[oy] * w + a] += go * fy * (1 - fx);
                           dst[ty.i1[oy] * w + b] += go * fy * fx;
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> avg_downsample(const Tensor<T>& input, I64 factor) {
  require_rank("avg_downsample", input, 4, "input");
  if (factor < 1) throw ShapeError("avg_downsample: factor must be >= 1");
  const I64 slices = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % factor) throw ShapeError("avg_downsample: height (dim 2) not divisible by factor");
  if (w % factor) throw ShapeError("avg_downsample: width (dim 3) not divisible by factor");
  const I64 oh = h / factor, ow = w / factor;
  const T inv = T(1) / static_cast<T>(factor * factor);
  const auto x = input.data();
  std::vector<T> out(static_cast<std::size_t>(slices * oh * ow));
  for (I64 s = 0; s < slices; ++s)
    for (I64 oy = 0; oy < oh; ++oy)
      for (I64 ox = 0; ox < ow; ++ox) {
        T acc = 0;
        for (I64 dy = 0; dy < factor; ++dy)
          for (I64 dx = 0; dx < factor; ++dx)
            acc += x[(s * h + oy * factor + dy) * w + ox * factor + dx];
        out[(s * oh + oy) * ow + ox] = acc * inv;
      }
  Shape shape{input.dim(0), input.dim(1), oh, ow};
  return record<T>("avg_downsample", std::move(shape), std::move(out), {&input},
                   [=](const std::vector<T>& g) {
                     T* gi = grad_ptr(input);
                     for (I64 s = 0; s < slices; ++s)
                       for (I64 oy = 0; oy < oh; ++oy)
                         for (I64 ox = 0; ox < ow; ++ox) {
                           const T d = g[(s * oh + oy) * ow + ox] * inv;
                           for (I64 dy = 0; dy < factor; ++dy)
                             for (I64 dx = 0; dx < factor; ++dx)
                               gi[(s * h + oy * factor + dy) * w + ox * factor + dx] += d;
                         }
                   });
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& input, I64 top, I64 bottom, I64 left, I64 right, PadMode mode) {
  require_rank("pad2d", input, 4, "input");
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("pad2d: negative pad");
  const I64 slices = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (mode == PadMode::Reflect && (top >= h || bottom >= h))
    throw ShapeError("pad2d: reflect pad must be smaller than height (dim 2)");
  if (mode == PadMode::Reflect && (left >= w || right >= w))
    throw ShapeError("pad2d: reflect pad must be smaller than width (dim 3)");
  auto map = [mode](I64 i, I64 n) {
    if (mode == PadMode::Replicate) return std::clamp<I64>(i, 0, n - 1);
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  const I64 oh = h + top + bottom, ow = w + left + right;
  std::vector<I64> ys(oh), xs(ow);
  for (I64 y = 0; y < oh; ++y) ys[y] = map(y - top, h);
  for (I64 x = 0; x < ow; ++x) xs[x] = map(x - left, w);
  const auto x = input.data();
  std::vector<T> out(static_cast<std::size_t>(slices * oh * ow));
  for (I64 s = 0; s < slices; ++s)
    for (I64 y = 0; y < oh; ++y)
      for (I64 xx = 0; xx < ow; ++xx) out[(s * oh + y) * ow + xx] = x[(s * h + ys[y]) * w + xs[xx]];
  Shape shape{input.dim(0), input.dim(1), oh, ow};
  return record<T>("pad2d", std::move(shape), std::move(out), {&input},
                   [=](const std::vector<T>& g) {
                     T* gi = grad_ptr(input);
                     for (I64 s = 0; s < slices; ++s)
                       for (I64 y = 0; y < oh; ++y)
                         for (I64 xx = 0; xx < ow; ++xx)
                           gi[(s * h + ys[y]) * w + xs[xx]] += g[(s * oh + y) * ow + xx];
                   });
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& input, I64 top, I64 left, I64 ch, I64 cw) {
  require_rank("crop2d", input, 4, "input");
  const I64 slices = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (top < 0 || ch < 0 || top + ch > h) throw ShapeError("crop2d: rows exceed height (dim 2)");
  if (left < 0 || cw < 0 || left + cw > w) throw ShapeError("crop2d: cols exceed width (dim 3)");
  const auto x = input.data();
  std::vector<T> out(static_cast<std::size_t>(slices * ch * cw));
  for (I64 s = 0; s < slices; ++s)
    for (I64 y = 0; y < ch; ++y)
      std::copy_n(x.begin() + (s * h + top + y) * w + left, cw, out.begin() + (s * ch + y) * cw);
  Shape shape{input.dim(0), input.dim(1), ch, cw};
  return record<T>("crop2d", std::move(shape), std::move(out), {&input},
                   [=](const std::vector<T>& g) {
                     T* gi = grad_ptr(input);
                     for (I64 s = 0; s < slices; ++s)
                       for (I64 y = 0; y < ch; ++y)
                         for (I64 xx = 0; xx < cw; ++xx)
                           gi[(s * h + top + y) * w + left + xx] += g[(s * ch + y) * cw + xx];
                   });
}

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  require_rank("channel_affine", x, 4, "input");
  const I64 n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : {&scale, &shift}) {
    if (!p->defined()) continue;
    if (p->ndim() != 2 || p->dim(0) != n || p->dim(1) != c)
      throw ShapeError("channel_affine: modulation shape " + shape_str(p->shape()) +
                       " does not match [N,C] = [" + std::to_string(n) + "," + std::to_string(c) +
                       "] (channel dim 1)");
  }
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (I64 s = 0; s < n * c; ++s) {
    const T a = scale.defined() ? scale.data()[s] : T(1);
    const T b = shift.defined() ? shift.data()[s] : T(0);
    for (I64 i = 0; i < plane; ++i) out[s * plane + i] = a * xv[s * plane + i] + b;
  }
  return record<T>("channel_affine", x.shape(), std::move(out), {&x, &scale, &shift},
                   [=](const std::vector<T>& g) {
                     const auto xv = x.data();
                     T* gx = grad_ptr(x);
                     T* ga = grad_ptr(scale);
                     T* gb = grad_ptr(shift);
                     for (I64 s = 0; s < n * c; ++s) {
                       const T a = scale.defined() ? scale.data()[s] : T(1);
                       T sa = 0, sb = 0;
                       for (I64 i = 0; i < plane; ++i) {
                         const T gi = g[s * plane + i];
                         if (gx) gx[s * plane + i] += a * gi;
                         sa += gi * xv[s * plane + i];
                         sb += gi;
                       }
                       if (ga) ga[s] += sa;
                       if (gb) gb[s] += sb;
                     }
                   });
}

template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scale must have one element");
  const T sv = s.data()[0];
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv;
  return record<T>("scale_by", x.shape(), std::move(out), {&x, &s}, [x, s](const std::vector<T>& g) {
    const auto xv = x.data();
    const T sv = s.data()[0];
    if (T* gx = grad_ptr(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    if (T* gs = grad_ptr(s)) {
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      gs[0] += acc;
    }
  });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  require_rank("l2_normalize_rows", x, 2, "input");
  const I64 n = x.dim(0), d = x.dim(1);
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  std::vector<T> norms(static_cast<std::size_t>(n));
  for (I64 r = 0; r < n; ++r) {
    double ss = 0;
    for (I64 j = 0; j < d; ++j) ss += static_cast<double>(xv[r * d + j]) * xv[r * d + j];
    const T nr = static_cast<T>(std::sqrt(ss));
    norms[r] = nr;
    const T den = std::max(nr, eps);
    for (I64 j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / den;
  }
  std::vector<T> y = out;
  return record<T>("l2_normalize_rows", x.shape(), std::move(out), {&x},
                   [x, y = std::move(y), norms = std::move(norms), n, d, eps](const std::vector<T>& g) {
                     T* gx = grad_ptr(x);
                     for (I64 r = 0; r < n; ++r) {
                       const T den = std::max(norms[r], eps);
                       if (norms[r] > eps) {
                         T dot = 0;
                         for (I64 j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
                         for (I64 j = 0; j < d; ++j)
                           gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / den;
                       } else {
                         for (I64 j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] / den;
                       }
                     }
                   });
}

template <typename T>
Tensor<T> weighted_channel_sum(const Tensor<T>& x, const std::vector<T>& weights) {
  require_rank("weighted_channel_sum", x, 4, "input");
  const I64 n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (static_cast<I64>(weights.size()) != c)
    throw ShapeError("weighted_channel_sum: " + std::to_string(weights.size()) +
                     " weights for " + std::to_string(c) + " channels (dim 1)");
  const auto xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(n * plane), T(0));
  for (I64 b = 0; b < n; ++b)
    for (I64 ch = 0; ch < c; ++ch)
      for (I64 i = 0; i < plane; ++i) out[b * plane + i] += weights[ch] * xv[(b * c + ch) * plane + i];
  Shape shape{n, 1, x.dim(2), x.dim(3)};
  return record<T>("weighted_channel_sum", std::move(shape), std::move(out), {&x},
                   [=](const std::vector<T>& g) {
                     T* gx = grad_ptr(x);
                     for (I64 b = 0; b < n; ++b)
                       for (I64 ch = 0; ch < c; ++ch)
                         for (I64 i = 0; i < plane; ++i)
                           gx[(b * c + ch) * plane + i] += weights[ch] * g[b * plane + i];
                   });
}

template <typename T>
Tensor<T> dark_channel(const Tensor<T>& x, I64 window) {
  require_rank("dark_channel", x, 4, "input");
  if (window < 1) throw ShapeError("dark_channel: window must be >= 1");
  const I64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), plane = h * w;
  if (c < 1) throw ShapeError("dark_channel: no channels (dim 1)");
  const kernels::MinFilterGeom geom{h, w, (window - 1) / 2, window / 2};
  const auto xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(n * plane));
  std::vector<std::int32_t> src_index(static_cast<std::size_t>(n * plane));
  std::vector<T> cmin(static_cast<std::size_t>(plane));
  std::vector<std::int32_t> cidx(static_cast<std::size_t>(n * plane));
  std::vector<std::int32_t> am(static_cast<std::size_t>(plane));
  for (I64 b = 0; b < n; ++b) {
    for (I64 i = 0; i < plane; ++i) {
      I64 best = 0;
      for (I64 ch = 1; ch < c; ++ch)
        if (xv[(b * c + ch) * plane + i] < xv[(b * c + best) * plane + i]) best = ch;
      cmin[i] = xv[(b * c + best) * plane + i];
      cidx[b * plane + i] = static_cast<std::int32_t>(best);
    }
    kernels::min_filter(geom, cmin.data(), out.data() + b * plane, am.data());
    for (I64 i = 0; i < plane; ++i) {
      const I64 p = am[i];
      src_index[b * plane + i] = static_cast<std::int32_t>((b * c + cidx[b * plane + p]) * plane + p);
    }
  }
  if (g_trace)
    for (const auto idx : src_index) g_trace->note(static_cast<std::uint64_t>(idx));
  Shape shape{n, 1, h, w};
  return record<T>("dark_channel", std::move(shape), std::move(out), {&x},
                   [x, src_index = std::move(src_index)](const std::vector<T>& g) {
                     T* gx = grad_ptr(x);
                     for (std::size_t i = 0; i < g.size(); ++i) gx[src_index[i]] += g[i];
                   });
}

template <typename T>
Tensor<T> multi_positive_nce(const Tensor<T>& logits, const std::vector<std::uint8_t>& valid,
                             const std::vector<std::uint8_t>& positive, int* surviving_rows) {
  require_rank("multi_positive_nce", logits, 2, "logits");
  const I64 rows = logits.dim(0), cols = logits.dim(1);
  if (static_cast<I64>(valid.size()) != rows * cols ||
      static_cast<I64>(positive.size()) != rows * cols)
    throw ShapeError("multi_positive_nce: mask size does not match logits " +
                     shape_str(logits.shape()));
  const auto l = logits.data();
  std::vector<T> softmax(static_cast<std::size_t>(rows * cols), T(0));
  std::vector<I64> npos(static_cast<std::size_t>(rows), 0);
  double total = 0;
  int alive = 0;
  for (I64 i = 0; i < rows; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (I64 a = 0; a < cols; ++a) {
      if (positive[i * cols + a] && !valid[i * cols + a])
        throw ConfigError("multi_positive_nce: positive outside the candidate set");
      if (valid[i * cols + a]) mx = std::max(mx, l[i * cols + a]);
      npos[i] += positive[i * cols + a] ? 1 : 0;
    }
    if (npos[i] == 0) continue;
    ++alive;
    double z = 0;
    for (I64 a = 0; a < cols; ++a)
      if (valid[i * cols + a]) z += std::exp(static_cast<double>(l[i * cols + a] - mx));
    const double lse = mx + std::log(z);
    double acc = 0;
    for (I64 a = 0; a < cols; ++a) {
      if (valid[i * cols + a])
        softmax[i * cols + a] = static_cast<T>(std::exp(l[i * cols + a] - lse));
      if (positive[i * cols + a]) acc += lse - l[i * cols + a];
    }
    total += acc / static_cast<double>(npos[i]);
  }
  if (surviving_rows) *surviving_rows = alive;
  const T value = alive ? static_cast<T>(total / alive) : T(0);
  return record<T>("multi_positive_nce", Shape{1}, {value}, {&logits},
                   [=, softmax = std::move(softmax), npos = std::move(npos)](const std::vector<T>& g) {
                     if (!alive) return;
                     T* gl = grad_ptr(logits);
                     const T w = g[0] / static_cast<T>(alive);
                     for (I64 i = 0; i < rows; ++i) {
                       if (npos[i] == 0) continue;
                       const T inv = T(1) / static_cast<T>(npos[i]);
                       for (I64 a = 0; a < cols; ++a) {
                         if (!valid[i * cols + a]) continue;
                         const T target = positive[i * cols + a] ? inv : T(0);
                         gl[i * cols + a] += w * (softmax[i * cols + a] - target);
                       }
                     }
                   });
}

#define EXPX_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> abs(const Tensor<T>&);                                                     \
  template Tensor<T> square(const Tensor<T>&);                                                  \
  template Tensor<T> sqrt(const Tensor<T>&);                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> narrow(const Tensor<T>&, std::size_t, I64, I64);                           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                    \
  template Tensor<T> softmax_last(const Tensor<T>&);                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, I64, I64);    \
  template Tensor<T> instance_norm(const Tensor<T>&, T);                                        \
  template Tensor<T> adaptive_avg_pool2d(const Tensor<T>&, I64, I64);                           \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, I64);                                  \
  template Tensor<T> avg_downsample(const Tensor<T>&, I64);                                     \
  template Tensor<T> pad2d(const Tensor<T>&, I64, I64, I64, I64, PadMode);                      \
  template Tensor<T> crop2d(const Tensor<T>&, I64, I64, I64, I64);                              \
  template Tensor<T> channel_affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> scale_by(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&, T);                                    \
  template Tensor<T> weighted_channel_sum(const Tensor<T>&, const std::vector<T>&);             \
  template Tensor<T> dark_channel(const Tensor<T>&, I64);                                       \
  template Tensor<T> multi_positive_nce(const Tensor<T>&, const std::vector<std::uint8_t>&,     \
                                        const std::vector<std::uint8_t>&, int*);

EXPX_INSTANTIATE_OPS(float)
EXPX_INSTANTIATE_OPS(double)

}  // namespace expx::ops
