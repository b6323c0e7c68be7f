#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace expx::detail {

// Source taps for align_corners=false bilinear resampling along one axis:
// output o reads in[i0] and in[i1] blended by frac.
struct BilinearTaps {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> frac;
};

inline BilinearTaps bilinear_taps(std::int64_t in, std::int64_t out) {
  BilinearTaps t;
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = std::max(0.0, (o + 0.5) * scale - 0.5);
    const std::int64_t a = std::min<std::int64_t>(static_cast<std::int64_t>(src), in - 1);
    t.i0.push_back(a);
    t.i1.push_back(std::min<std::int64_t>(a + 1, in - 1));
    t.frac.push_back(a == in - 1 ? 0.0 : src - static_cast<double>(a));
  }
  return t;
}

}  // namespace expx::detail
