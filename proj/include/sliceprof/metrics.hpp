#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sliceprof/errors.hpp"
#include "sliceprof/filters.hpp"
#include "sliceprof/profile.hpp"
#include "sliceprof/volume.hpp"

namespace sliceprof {

/// Full width at half maximum in mm. Half-max crossings are located by linear
/// interpolation between adjacent taps on each side; plateau maxima use the
/// outermost crossings.
inline double fwhm(const Profile& profile) {
  const auto& t = profile.taps;
  if (t.size() < 3) throw measurement_error("fwhm: need at least 3 taps");
  const double peak = *std::max_element(t.begin(), t.end());
  if (!(peak > 0.0)) throw measurement_error("fwhm: profile has no positive peak");
  const double half = peak / 2.0;

  std::size_t left = 0;
  while (left < t.size() && t[left] < half) ++left;
  if (left == 0) {
    throw measurement_error("fwhm: no left half-max crossing (monotone or clipped profile)");
  }
  const double x_left =
      static_cast<double>(left - 1) + (half - t[left - 1]) / (t[left] - t[left - 1]);

  std::size_t right = t.size() - 1;
  while (t[right] < half) --right;
  if (right == t.size() - 1) {
    throw measurement_error("fwhm: no right half-max crossing (monotone or clipped profile)");
  }
  const double x_right =
      static_cast<double>(right + 1) - (half - t[right + 1]) / (t[right] - t[right + 1]);

  return (x_right - x_left) * profile.spacing_mm;
}

/// Sum of absolute tap differences after aligning rounded centroids. Profiles
/// of different (odd) lengths are zero-padded symmetrically first.
inline double profile_error(const Profile& truth, const Profile& estimate) {
  if (std::abs(truth.spacing_mm - estimate.spacing_mm) >
      1e-9 * std::max(truth.spacing_mm, estimate.spacing_mm)) {
    throw value_error("profile_error: spacing mismatch (" + std::to_string(truth.spacing_mm) +
                      " vs " + std::to_string(estimate.spacing_mm) + " mm)");
  }
  std::vector<double> a = truth.taps, b = estimate.taps;
  const std::size_t n = std::max(a.size(), b.size());
  auto pad_centered = [n](std::vector<double>& v) {
    if (v.size() == n) return;
    const std::size_t add = n - v.size();
    std::vector<double> out(n, 0.0);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(add / 2));
    v = std::move(out);
  };
  pad_centered(a);
  pad_centered(b);

  auto centroid = [](const std::vector<double>& v) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      num += static_cast<double>(i) * v[i];
      den += v[i];
    }
    return den != 0.0 ? num / den : 0.0;
  };
  const long shift = std::lround(centroid(a)) - std::lround(centroid(b));

  double err = 0.0;
  for (long i = 0; i < static_cast<long>(n); ++i) {
    const long j = i - shift;
    const double bv = (j >= 0 && j < static_cast<long>(n)) ? b[static_cast<std::size_t>(j)] : 0.0;
    err += std::abs(a[static_cast<std::size_t>(i)] - bv);
  }
  return err;
}

namespace detail {

inline void require_same_grid(const Volume& a, const Volume& b, const Mask& mask,
                              const char* what) {
  if (a.extents != b.extents || a.extents != mask.extents) {
    throw shape_error(std::string(what) + ": volumes/mask extents differ");
  }
}

}  // namespace detail

/// Peak signal-to-noise ratio over masked voxels, with the peak taken as the
/// masked maximum of the reference `a`; capped at 200 dB near-zero MSE.
inline double psnr(const Volume& a, const Volume& b, const Mask& mask) {
  detail::require_same_grid(a, b, mask, "psnr");
  double peak = -std::numeric_limits<double>::infinity();
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    if (!mask.values[i]) continue;
    const double av = a.values[i];
    peak = std::max(peak, av);
    const double d = av - static_cast<double>(b.values[i]);
    sq += d * d;
    ++n;
  }
  if (n == 0) throw value_error("psnr: empty mask");
  if (!(peak > 0.0)) throw value_error("psnr: reference peak is not positive");
  const double mse = sq / static_cast<double>(n);
  if (mse < peak * peak * 1e-20) return 200.0;
  return 10.0 * std::log10(peak * peak / mse);
}

/// Single-scale SSIM with a separable 3D Gaussian window (sigma 1.5, 11
/// taps), averaged over masked voxels. `fixed_range` overrides the dynamic
/// range (otherwise the masked range of `a` is used).
inline double ssim(const Volume& a, const Volume& b, const Mask& mask,
                   std::optional<double> fixed_range = std::nullopt) {
  detail::require_same_grid(a, b, mask, "ssim");
  if (mask.count() == 0) throw value_error("ssim: empty mask");

  double range;
  if (fixed_range) {
    range = *fixed_range;
  } else {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < mask.values.size(); ++i) {
      if (!mask.values[i]) continue;
      lo = std::min(lo, static_cast<double>(a.values[i]));
      hi = std::max(hi, static_cast<double>(a.values[i]));
    }
    range = hi - lo;
  }
  if (!(range > 0.0)) throw value_error("ssim: dynamic range is not positive");
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);

  const std::size_t n = a.values.size();
  std::vector<double> mu_a(n), mu_b(n), aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double av = a.values[i], bv = b.values[i];
    mu_a[i] = av;
    mu_b[i] = bv;
    aa[i] = av * av;
    bb[i] = bv * bv;
    ab[i] = av * bv;
  }
  constexpr double kSigma = 1.5;
  constexpr int kRadius = 5;  // 11-tap window
  gaussian_smooth3d(mu_a, a.extents, kSigma, kRadius);
  gaussian_smooth3d(mu_b, a.extents, kSigma, kRadius);
  gaussian_smooth3d(aa, a.extents, kSigma, kRadius);
  gaussian_smooth3d(bb, a.extents, kSigma, kRadius);
  gaussian_smooth3d(ab, a.extents, kSigma, kRadius);

  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.values[i]) continue;
    const double va = aa[i] - mu_a[i] * mu_a[i];
    const double vb = bb[i] - mu_b[i] * mu_b[i];
    const double cov = ab[i] - mu_a[i] * mu_b[i];
    const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
    const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
    acc += num / den;
    ++count;
  }
  return acc / static_cast<double>(count);
}

/// Evaluation summary: the four profile/image metrics plus an echo of how
/// they were produced.
struct EvalReport {
  double fwhm_true_mm = 0.0;
  double fwhm_est_mm = 0.0;
  double fwhm_error_mm = 0.0;
  double profile_error = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  // echo
  std::string truth_kind = "unknown";
  double truth_fwhm_mm = 0.0;
  std::uint64_t scale = 1;
  std::uint64_t seed = 0;
  double mask_fraction = 0.1;
  double psnr_peak = 0.0;  ///< masked max of the reference degradation
  std::string degradation = "blur+downsample,phase0";
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  return nlohmann::json{
      {"fwhm_true_mm", r.fwhm_true_mm},
      {"fwhm_est_mm", r.fwhm_est_mm},
      {"fwhm_error_mm", r.fwhm_error_mm},
      {"profile_error", r.profile_error},
      {"psnr_db", r.psnr_db},
      {"ssim", r.ssim},
      {"config",
       {{"truth_kind", r.truth_kind},
        {"truth_fwhm_mm", r.truth_fwhm_mm},
        {"scale", r.scale},
        {"seed", r.seed},
        {"mask_fraction", r.mask_fraction},
        {"psnr_peak", r.psnr_peak},
        {"degradation", r.degradation}}}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.fwhm_true_mm = j.at("fwhm_true_mm").get<double>();
    r.fwhm_est_mm = j.at("fwhm_est_mm").get<double>();
    r.fwhm_error_mm = j.at("fwhm_error_mm").get<double>();
    r.profile_error = j.at("profile_error").get<double>();
    r.psnr_db = j.at("psnr_db").get<double>();
    r.ssim = j.at("ssim").get<double>();
    const auto& c = j.at("config");
    r.truth_kind = c.at("truth_kind").get<std::string>();
    r.truth_fwhm_mm = c.at("truth_fwhm_mm").get<double>();
    r.scale = c.at("scale").get<std::uint64_t>();
    r.seed = c.at("seed").get<std::uint64_t>();
    r.mask_fraction = c.at("mask_fraction").get<double>();
    r.psnr_peak = c.at("psnr_peak").get<double>();
    r.degradation = c.at("degradation").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("eval report json: ") + e.what());
  }
  return r;
}

}  // namespace sliceprof
