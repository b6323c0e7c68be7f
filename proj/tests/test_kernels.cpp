#include <doctest.h>

#include <random>

#include "expx/kernels.hpp"
#include "oracles.hpp"

using namespace expx;
namespace k = expx::kernels;

namespace {

struct ConvCase {
  std::int64_t n, c, h, w, co, kern, stride, pad;
};

const ConvCase kCases[] = {
    {1, 2, 5, 5, 3, 3, 1, 1}, {2, 3, 9, 7, 4, 3, 2, 1}, {1, 4, 8, 8, 2, 1, 1, 0},
    {2, 1, 16, 16, 5, 3, 2, 1}, {1, 3, 6, 11, 2, 5, 1, 2}, {1, 2, 7, 7, 3, 3, 3, 1},
};

template <typename T>
std::vector<T> rand_vec(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

}  // namespace

TEST_CASE("serial conv forward matches the naive oracle") {
  std::mt19937_64 rng(1);
  for (const auto& cs : kCases) {
    const auto g = k::make_conv_geom(cs.n, cs.c, cs.h, cs.w, cs.co, cs.kern, cs.stride, cs.pad);
    auto in = rand_vec<double>(rng, cs.n * cs.c * cs.h * cs.w);
    auto wt = rand_vec<double>(rng, cs.co * cs.c * cs.kern * cs.kern);
    auto b = rand_vec<double>(rng, cs.co);
    std::int64_t oh, ow;
    const auto ref = oracle::conv2d(in, cs.n, cs.c, cs.h, cs.w, wt, cs.co, cs.kern, b, cs.stride,
                                    cs.pad, &oh, &ow);
    REQUIRE(oh == g.out_h);
    REQUIRE(ow == g.out_w);
    for (auto mode : {k::Mode::Serial, k::Mode::Parallel}) {
      k::ModeGuard mg(mode);
      std::vector<double> out(ref.size());
      k::conv2d_forward(g, in.data(), wt.data(), b.data(), out.data());
      for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("parallel conv kernels agree with serial ones") {
  std::mt19937_64 rng(2);
  for (const auto& cs : kCases) {
    const auto g = k::make_conv_geom(cs.n, cs.c, cs.h, cs.w, cs.co, cs.kern, cs.stride, cs.pad);
    const auto in = rand_vec<float>(rng, cs.n * cs.c * cs.h * cs.w);
    const auto wt = rand_vec<float>(rng, cs.co * cs.c * cs.kern * cs.kern);
    const auto b = rand_vec<float>(rng, cs.co);
    const auto go = rand_vec<float>(rng, cs.n * cs.co * g.out_h * g.out_w);

    std::vector<float> fs(go.size()), fp(go.size());
    k::serial::conv2d_forward(g, in.data(), wt.data(), b.data(), fs.data());
    k::parallel::conv2d_forward(g, in.data(), wt.data(), b.data(), fp.data());
    for (std::size_t i = 0; i < fs.size(); ++i) CHECK(fp[i] == doctest::Approx(fs[i]).epsilon(1e-5));

    std::vector<float> gis(in.size(), 0.5f), gip(in.size(), 0.5f);
    k::serial::conv2d_backward_input(g, go.data(), wt.data(), gis.data());
    k::parallel::conv2d_backward_input(g, go.data(), wt.data(), gip.data());
    for (std::size_t i = 0; i < gis.size(); ++i) CHECK(gip[i] == doctest::Approx(gis[i]).epsilon(1e-5));

    std::vector<float> gws(wt.size(), 0.25f), gwp(wt.size(), 0.25f), gbs(cs.co, 1.0f), gbp(cs.co, 1.0f);
    k::serial::conv2d_backward_weight(g, go.data(), in.data(), gws.data(), gbs.data());
    k::parallel::conv2d_backward_weight(g, go.data(), in.data(), gwp.data(), gbp.data());
    for (std::size_t i = 0; i < gws.size(); ++i) CHECK(gwp[i] == doctest::Approx(gws[i]).epsilon(1e-4));
    for (std::size_t i = 0; i < gbs.size(); ++i) CHECK(gbp[i] == doctest::Approx(gbs[i]).epsilon(1e-4));
  }
}

TEST_CASE("conv backward is the adjoint of forward") {
  // <conv(x), y> == <x, conv_T(y)> and == <w, dW(x, y)>
  std::mt19937_64 rng(3);
  const auto g = k::make_conv_geom(2, 3, 9, 8, 4, 3, 2, 1);
  const auto x = rand_vec<double>(rng, 2 * 3 * 9 * 8);
  const auto w = rand_vec<double>(rng, 4 * 3 * 9);
  const auto y = rand_vec<double>(rng, 2 * 4 * g.out_h * g.out_w);
  std::vector<double> cx(y.size()), cty(x.size(), 0.0), dw(w.size(), 0.0);
  k::conv2d_forward(g, x.data(), w.data(), nullptr, cx.data());
  k::conv2d_backward_input(g, y.data(), w.data(), cty.data());
  k::conv2d_backward_weight(g, y.data(), x.data(), dw.data(), nullptr);
  double lhs = 0, rhs = 0, rw = 0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * cty[i];
  for (std::size_t i = 0; i < w.size(); ++i) rw += w[i] * dw[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  CHECK(lhs == doctest::Approx(rw).epsilon(1e-12));
}

TEST_CASE("conv geometry errors name the dimension") {
  CHECK_THROWS_WITH_AS(k::make_conv_geom(1, 1, 2, 9, 1, 5, 1, 0), doctest::Contains("dim 2"), ShapeError);
  CHECK_THROWS_WITH_AS(k::make_conv_geom(1, 1, 9, 2, 1, 5, 1, 0), doctest::Contains("dim 3"), ShapeError);
}

TEST_CASE("min filter: serial and parallel match a brute-force scan exactly") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng() % 33);
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng() % 33);
    const std::int64_t win = 1 + static_cast<std::int64_t>(rng() % 17);
    const k::MinFilterGeom g{h, w, (win - 1) / 2, win / 2};
    // Coarse values so ties are common and argmin order matters.
    std::vector<float> src(h * w);
    for (auto& v : src) v = static_cast<float>(rng() % 5) / 4.0f;
    std::vector<float> ds(h * w), dp(h * w);
    std::vector<std::int32_t> as(h * w), ap(h * w);
    k::serial::min_filter(g, src.data(), ds.data(), as.data());
    k::parallel::min_filter(g, src.data(), dp.data(), ap.data());
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        float best = 2;
        std::int32_t arg = -1;
        for (std::int64_t dy = -g.lo; dy <= g.hi; ++dy)
          for (std::int64_t dx = -g.lo; dx <= g.hi; ++dx) {
            const auto yy = std::clamp<std::int64_t>(y + dy, 0, h - 1);
            const auto xx = std::clamp<std::int64_t>(x + dx, 0, w - 1);
            if (src[yy * w + xx] < best) {
              best = src[yy * w + xx];
              arg = static_cast<std::int32_t>(yy * w + xx);
            }
          }
        const auto i = y * w + x;
        CHECK(ds[i] == best);
        CHECK(dp[i] == best);
        CHECK(as[i] == arg);
        CHECK(ap[i] == arg);
      }
  }
}

TEST_CASE("parallel kernels are run-to-run deterministic") {
  std::mt19937_64 rng(5);
  const auto g = k::make_conv_geom(2, 8, 32, 32, 8, 3, 1, 1);
  const auto x = rand_vec<float>(rng, 2 * 8 * 32 * 32);
  const auto w = rand_vec<float>(rng, 8 * 8 * 9);
  std::vector<float> a(2 * 8 * 32 * 32), b(a.size());
  k::parallel::conv2d_forward(g, x.data(), w.data(), nullptr, a.data());
  k::parallel::conv2d_forward(g, x.data(), w.data(), nullptr, b.data());
  CHECK(a == b);
}
