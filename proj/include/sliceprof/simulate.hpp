#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sliceprof/errors.hpp"
#include "sliceprof/filters.hpp"
#include "sliceprof/profile.hpp"
#include "sliceprof/rng.hpp"
#include "sliceprof/volume.hpp"

namespace sliceprof {

enum class ProfileKind { gaussian, rect };

/// Ground-truth profile recipe: a Gaussian or rect of a given FWHM,
/// discretized on `support` taps at `spacing_mm`.
struct TruthProfileSpec {
  ProfileKind kind = ProfileKind::gaussian;
  double fwhm_mm = 2.0;
  double spacing_mm = 1.0;
  std::size_t support = 21;  ///< K_t, odd
};

/// Discretizes the truth profile. Gaussians are point-sampled; rects are
/// area-sampled (interval overlap per tap). Taps are normalized to unit sum.
inline Profile make_profile(const TruthProfileSpec& spec) {
  if (spec.support < 3 || spec.support % 2 == 0) {
    throw config_error("make_profile: support must be odd and >= 3");
  }
  if (!(spec.fwhm_mm > 0.0) || !(spec.spacing_mm > 0.0)) {
    throw config_error("make_profile: fwhm and spacing must be > 0");
  }
  if (static_cast<double>(spec.support) * spec.spacing_mm < 2.0 * spec.fwhm_mm) {
    throw config_error("make_profile: support " + std::to_string(spec.support) + " x " +
                       std::to_string(spec.spacing_mm) + " mm cannot cover a " +
                       std::to_string(spec.fwhm_mm) + " mm FWHM (need support*spacing >= 2*fwhm)");
  }
  Profile p;
  p.spacing_mm = spec.spacing_mm;
  p.taps.resize(spec.support);
  const double c = static_cast<double>((spec.support - 1) / 2);
  double sum = 0.0;
  if (spec.kind == ProfileKind::gaussian) {
    const double sigma = spec.fwhm_mm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    for (std::size_t i = 0; i < spec.support; ++i) {
      const double x = (static_cast<double>(i) - c) * spec.spacing_mm;
      p.taps[i] = std::exp(-0.5 * x * x / (sigma * sigma));
      sum += p.taps[i];
    }
  } else {
    const double half_width = spec.fwhm_mm / 2.0;
    const double half_tap = spec.spacing_mm / 2.0;
    for (std::size_t i = 0; i < spec.support; ++i) {
      const double x = (static_cast<double>(i) - c) * spec.spacing_mm;
      const double overlap =
          std::min(x + half_tap, half_width) - std::max(x - half_tap, -half_width);
      p.taps[i] = std::max(0.0, overlap);
      sum += p.taps[i];
    }
  }
  for (double& t : p.taps) t /= sum;
  return p;
}

/// Blurs each (x, y) column along z with the profile (valid convolution),
/// then keeps every `scale`-th slice starting at phase 0. The output z
/// spacing is scale times the input z spacing.
inline Volume degrade_volume(const Volume& volume, const Profile& profile, std::size_t scale) {
  if (scale < 1) throw value_error("degrade_volume: scale must be >= 1");
  const std::size_t k = profile.size();
  const auto [nx, ny, nz] = volume.extents;
  if (nz < k) {
    throw shape_error("degrade_volume: z extent " + std::to_string(nz) +
                      " is shorter than the profile (" + std::to_string(k) + " taps)");
  }
  if (std::abs(profile.spacing_mm - volume.spacing_mm[2]) >
      1e-6 * std::max(profile.spacing_mm, volume.spacing_mm[2])) {
    throw value_error("degrade_volume: profile sampled at " + std::to_string(profile.spacing_mm) +
                      " mm but volume z spacing is " + std::to_string(volume.spacing_mm[2]) +
                      " mm");
  }
  const std::size_t conv_z = nz - k + 1;
  const std::size_t out_z = (conv_z + scale - 1) / scale;
  Volume out;
  out.extents = {nx, ny, out_z};
  out.spacing_mm = {volume.spacing_mm[0], volume.spacing_mm[1],
                    volume.spacing_mm[2] * static_cast<double>(scale)};
  out.values.resize(nx * ny * out_z);
  for (std::size_t y = 0; y < ny; ++y) {
    for (std::size_t x = 0; x < nx; ++x) {
      for (std::size_t zo = 0; zo < out_z; ++zo) {
        const std::size_t z0 = zo * scale;
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          acc += profile.taps[j] * static_cast<double>(volume.at(x, y, z0 + j));
        }
        out.at(x, y, zo) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

/// Procedural isotropic test object: smoothed white noise quantized into
/// three intensity levels, then lightly re-smoothed. Statistics are
/// axis-exchangeable by construction.
inline Volume make_phantom(std::uint64_t seed, std::array<std::size_t, 3> extents,
                           double correlation_length_vox = 4.0) {
  for (std::size_t e : extents) {
    if (e < 32) throw value_error("make_phantom: extents must be >= 32 voxels");
  }
  if (!(correlation_length_vox > 0.0)) {
    throw value_error("make_phantom: correlation length must be > 0");
  }
  Rng rng(seed);
  const std::size_t n = extents[0] * extents[1] * extents[2];
  std::vector<double> field(n);
  for (double& v : field) v = rng.normal();
  gaussian_smooth3d(field, extents, correlation_length_vox,
                    static_cast<int>(std::ceil(3.0 * correlation_length_vox)));

  std::vector<double> sorted = field;
  std::sort(sorted.begin(), sorted.end());
  const double t1 = sorted[n / 3];
  const double t2 = sorted[(2 * n) / 3];
  constexpr double kLevels[3] = {0.25, 0.6, 1.0};
  for (double& v : field) v = v < t1 ? kLevels[0] : (v < t2 ? kLevels[1] : kLevels[2]);
  gaussian_smooth3d(field, extents, 0.5, 2);

  Volume out;
  out.extents = extents;
  out.spacing_mm = {1.0, 1.0, 1.0};
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = static_cast<float>(field[i]);
  return out;
}

}  // namespace sliceprof
