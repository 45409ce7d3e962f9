#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "sliceprof/errors.hpp"

namespace sliceprof {

/// Normalized Gaussian taps over [-radius, radius].
inline std::vector<double> gaussian_taps(double sigma, int radius) {
  if (!(sigma > 0.0) || radius < 0) throw value_error("gaussian_taps: sigma > 0, radius >= 0");
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    taps[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : taps) v /= sum;
  return taps;
}

/// Separable Gaussian smoothing of an x-fastest 3D field. Windows that hang
/// over the volume border are renormalized to the in-bounds portion.
inline void gaussian_smooth3d(std::vector<double>& field, const std::array<std::size_t, 3>& extents,
                              double sigma, int radius) {
  const auto taps = gaussian_taps(sigma, radius);
  const std::size_t nx = extents[0], ny = extents[1];
  const std::size_t strides[3] = {1, nx, nx * ny};
  std::vector<double> scratch(field.size());
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t n = extents[static_cast<std::size_t>(axis)];
    const std::size_t stride = strides[axis];
    // iterate all lines along `axis`
    const std::size_t oa = (axis == 0) ? 1 : 0;
    const std::size_t ob = (axis == 2) ? 1 : 2;
    const std::size_t na = extents[oa], nb = extents[ob];
    const std::size_t sa = strides[oa], sb = strides[ob];
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t a = 0; a < na; ++a) {
        const std::size_t base = a * sa + b * sb;
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0, wsum = 0.0;
          const long lo = std::max<long>(0, static_cast<long>(i) - radius);
          const long hi = std::min<long>(static_cast<long>(n) - 1, static_cast<long>(i) + radius);
          for (long j = lo; j <= hi; ++j) {
            const double w = taps[static_cast<std::size_t>(j - static_cast<long>(i) + radius)];
            acc += w * field[base + static_cast<std::size_t>(j) * stride];
            wsum += w;
          }
          scratch[base + i * stride] = acc / wsum;
        }
      }
    }
    field.swap(scratch);
  }
}

}  // namespace sliceprof
