#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "sliceprof/metrics.hpp"
#include "sliceprof/simulate.hpp"

namespace sp = sliceprof;

namespace {

// Dense-grid FWHM oracle: evaluates the continuous Gaussian on a 0.001 mm
// grid and locates the half-max crossings by scanning.
double dense_gaussian_fwhm(double fwhm_mm) {
  const double sigma = fwhm_mm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  const double step = 0.001;
  const double extent = 3.0 * fwhm_mm;
  auto g = [&](double x) { return std::exp(-0.5 * x * x / (sigma * sigma)); };
  double left = 0.0, right = 0.0;
  for (double x = -extent; x < 0.0; x += step) {
    if (g(x) < 0.5 && g(x + step) >= 0.5) {
      left = x + step * (0.5 - g(x)) / (g(x + step) - g(x));
      break;
    }
  }
  for (double x = 0.0; x < extent; x += step) {
    if (g(x) >= 0.5 && g(x + step) < 0.5) {
      right = x + step * (g(x) - 0.5) / (g(x) - g(x + step));
      break;
    }
  }
  return right - left;
}

sp::Volume noise_volume(std::array<std::size_t, 3> extents, unsigned seed, float lo = 0.0f,
                        float hi = 1.0f) {
  sp::Volume v = sp::Volume::zeros(extents, {1, 1, 1});
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  for (float& x : v.values) x = dist(rng);
  return v;
}

sp::Mask full_mask(const sp::Volume& v) {
  sp::Mask m;
  m.extents = v.extents;
  m.values.assign(v.numel(), 1);
  return m;
}

// Direct windowed SSIM at one voxel of equal-extents volumes, renormalizing
// the 3D window to the in-bounds region; independent of the library path.
double ssim_at(const sp::Volume& a, const sp::Volume& b, std::size_t cx, std::size_t cy,
               std::size_t cz, double range) {
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const double sigma = 1.5;
  const int radius = 5;
  double wsum = 0.0, mu_a = 0.0, mu_b = 0.0;
  auto weight = [&](int dx, int dy, int dz) {
    return std::exp(-0.5 * (dx * dx + dy * dy + dz * dz) / (sigma * sigma));
  };
  auto in_bounds = [&](long x, long y, long z) {
    return x >= 0 && y >= 0 && z >= 0 && x < static_cast<long>(a.extents[0]) &&
           y < static_cast<long>(a.extents[1]) && z < static_cast<long>(a.extents[2]);
  };
  for (int dz = -radius; dz <= radius; ++dz) {
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        const long x = static_cast<long>(cx) + dx, y = static_cast<long>(cy) + dy,
                   z = static_cast<long>(cz) + dz;
        if (!in_bounds(x, y, z)) continue;
        const double w = weight(dx, dy, dz);
        wsum += w;
        mu_a += w * a.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                         static_cast<std::size_t>(z));
        mu_b += w * b.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                         static_cast<std::size_t>(z));
      }
    }
  }
  mu_a /= wsum;
  mu_b /= wsum;
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (int dz = -radius; dz <= radius; ++dz) {
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        const long x = static_cast<long>(cx) + dx, y = static_cast<long>(cy) + dy,
                   z = static_cast<long>(cz) + dz;
        if (!in_bounds(x, y, z)) continue;
        const double w = weight(dx, dy, dz) / wsum;
        const double av = a.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                               static_cast<std::size_t>(z));
        const double bv = b.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                               static_cast<std::size_t>(z));
        va += w * av * av;
        vb += w * bv * bv;
        cov += w * av * bv;
      }
    }
  }
  va -= mu_a * mu_a;
  vb -= mu_b * mu_b;
  cov -= mu_a * mu_b;
  return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
         ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
}

}  // namespace

TEST_CASE("fwhm interpolates half-max crossings") {
  SECTION("triangle with exact half-max neighbors") {
    sp::Profile p{{0.0, 0.5, 1.0, 0.5, 0.0}, 1.0};
    REQUIRE(sp::fwhm(p) == Catch::Approx(2.0).margin(1e-12));
  }
  SECTION("impulse measures one sample") {
    std::vector<double> taps(9, 0.0);
    taps[4] = 1.0;
    REQUIRE(sp::fwhm(sp::Profile{taps, 1.0}) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("discretized 4 mm Gaussian matches the dense-grid oracle") {
    const double want = dense_gaussian_fwhm(4.0);
    REQUIRE(want == Catch::Approx(4.0).margin(2e-3));  // oracle sanity
    sp::Profile p = sp::make_profile({sp::ProfileKind::gaussian, 4.0, 1.0, 25});
    REQUIRE(sp::fwhm(p) == Catch::Approx(want).margin(0.05));
  }
  SECTION("plateau maxima use the outermost crossings") {
    sp::Profile p{{0.0, 1.0, 1.0, 1.0, 0.0}, 2.0};
    REQUIRE(sp::fwhm(p) == Catch::Approx(2.0 * 3.0).margin(1e-12));
  }
  SECTION("monotone profile cannot be measured") {
    REQUIRE_THROWS_AS(sp::fwhm(sp::Profile{{0.0, 0.3, 0.6, 1.0}, 1.0}), sp::measurement_error);
  }
  SECTION("invariant to rescaling and interior shifts") {
    sp::Profile p = sp::make_profile({sp::ProfileKind::gaussian, 3.0, 1.0, 31});
    const double base = sp::fwhm(p);
    sp::Profile scaled = p;
    for (double& t : scaled.taps) t *= 7.5;
    REQUIRE(sp::fwhm(scaled) == Catch::Approx(base).margin(1e-12));
    sp::Profile shifted = p;
    std::rotate(shifted.taps.begin(), shifted.taps.end() - 3, shifted.taps.end());
    REQUIRE(sp::fwhm(shifted) == Catch::Approx(base).margin(1e-9));
  }
}

TEST_CASE("profile_error aligns rounded centroids then sums |diff|") {
  SECTION("identical profiles") {
    sp::Profile p = sp::make_profile({sp::ProfileKind::gaussian, 3.0, 1.0, 21});
    REQUIRE(sp::profile_error(p, p) == 0.0);
  }
  SECTION("integer shifts are absorbed") {
    std::vector<double> a(21, 0.0), b(21, 0.0);
    a[10] = 1.0;
    b[11] = 1.0;
    REQUIRE(sp::profile_error({a, 1.0}, {b, 1.0}) == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("fractional misalignment remains") {
    REQUIRE(sp::profile_error({{0.5, 0.5}, 1.0}, {{1.0, 0.0}, 1.0}) ==
            Catch::Approx(1.0).margin(1e-15));
  }
  SECTION("length padding is centered") {
    sp::Profile small{{0.2, 0.6, 0.2}, 1.0};
    std::vector<double> big(7, 0.0);
    big[2] = 0.2;
    big[3] = 0.6;
    big[4] = 0.2;
    REQUIRE(sp::profile_error({big, 1.0}, small) == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("symmetry in its arguments") {
    sp::Profile a = sp::make_profile({sp::ProfileKind::gaussian, 3.0, 1.0, 21});
    sp::Profile b = sp::make_profile({sp::ProfileKind::rect, 5.0, 1.0, 21});
    REQUIRE(sp::profile_error(a, b) == Catch::Approx(sp::profile_error(b, a)).margin(1e-15));
  }
  SECTION("spacing mismatch is rejected") {
    REQUIRE_THROWS_AS(sp::profile_error({{1.0}, 1.0}, {{1.0}, 2.0}), sp::value_error);
  }
}

TEST_CASE("psnr over a mask") {
  SECTION("identical volumes hit the 200 dB cap") {
    sp::Volume a = noise_volume({8, 8, 8}, 1);
    REQUIRE(sp::psnr(a, a, full_mask(a)) == 200.0);
  }
  SECTION("closed form for known MSE") {
    sp::Volume a = sp::Volume::zeros({10, 10, 10}, {1, 1, 1});
    sp::Volume b = a;
    for (float& v : a.values) v = 1.0f;
    for (float& v : b.values) v = 0.9f;  // MSE 0.01, R = 1
    REQUIRE(sp::psnr(a, b, full_mask(a)) == Catch::Approx(20.0).epsilon(1e-6));
  }
  SECTION("hand-built 2x2x1 masked case") {
    sp::Volume a = sp::Volume::zeros({2, 2, 1}, {1, 1, 1});
    sp::Volume b = a;
    a.values = {1.0f, 0.5f, 0.25f, 0.8f};
    b.values = {0.75f, 0.5f, 0.25f, 99.0f};
    sp::Mask m = full_mask(a);
    m.values = {1, 1, 1, 0};
    // masked: R = 1, MSE = (0.25^2 + 0 + 0)/3
    const double want = 10.0 * std::log10(1.0 / (0.0625 / 3.0));
    REQUIRE(sp::psnr(a, b, m) == Catch::Approx(want).epsilon(1e-6));
  }
  SECTION("near-identity perturbation stays above 180 dB") {
    sp::Volume a = noise_volume({8, 8, 8}, 2, 0.5f, 1.0f);
    sp::Volume b = a;
    for (float& v : b.values) v *= 1.0f + 1e-10f;
    REQUIRE(sp::psnr(a, b, full_mask(a)) > 180.0);
  }
  SECTION("empty mask is an argument error") {
    sp::Volume a = noise_volume({4, 4, 4}, 3);
    sp::Mask m;
    m.extents = a.extents;
    m.values.assign(a.numel(), 0);
    REQUIRE_THROWS_AS(sp::psnr(a, a, m), sp::value_error);
  }
}

TEST_CASE("ssim follows the windowed formula") {
  SECTION("identity") {
    sp::Volume a = noise_volume({12, 12, 12}, 4);
    REQUIRE(sp::ssim(a, a, full_mask(a)) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("constant offset matches the direct formula on a 5^3 patch") {
    sp::Volume a = noise_volume({5, 5, 5}, 5);
    sp::Volume b = a;
    for (float& v : b.values) v += 0.25f;
    double lo = a.values[0], hi = a.values[0];
    for (float v : a.values) {
      lo = std::min<double>(lo, v);
      hi = std::max<double>(hi, v);
    }
    const double range = hi - lo;
    double want = 0.0;
    for (std::size_t z = 0; z < 5; ++z) {
      for (std::size_t y = 0; y < 5; ++y) {
        for (std::size_t x = 0; x < 5; ++x) want += ssim_at(a, b, x, y, z, range);
      }
    }
    want /= 125.0;
    const double got = sp::ssim(a, b, full_mask(a));
    REQUIRE(got < 1.0);
    REQUIRE(got == Catch::Approx(want).margin(1e-10));
  }
  SECTION("independent noise decorrelates") {
    for (unsigned seed = 0; seed < 10; ++seed) {
      sp::Volume a = noise_volume({32, 32, 32}, 100 + seed);
      sp::Volume b = noise_volume({32, 32, 32}, 200 + seed);
      REQUIRE(std::abs(sp::ssim(a, b, full_mask(a))) < 0.2);
    }
  }
  SECTION("fixed shared range makes it exactly symmetric") {
    sp::Volume a = noise_volume({10, 10, 10}, 6);
    sp::Volume b = noise_volume({10, 10, 10}, 7);
    const double r = 1.0;
    REQUIRE(sp::ssim(a, b, full_mask(a), r) == sp::ssim(b, a, full_mask(a), r));
  }
  SECTION("empty mask is an argument error") {
    sp::Volume a = noise_volume({8, 8, 8}, 8);
    sp::Mask m;
    m.extents = a.extents;
    m.values.assign(a.numel(), 0);
    REQUIRE_THROWS_AS(sp::ssim(a, a, m), sp::value_error);
  }
}

TEST_CASE("eval report serializes round-trip") {
  sp::EvalReport r;
  r.fwhm_true_mm = 3.0;
  r.fwhm_est_mm = 3.21;
  r.fwhm_error_mm = 0.21;
  r.profile_error = 0.17;
  r.psnr_db = 44.5;
  r.ssim = 0.9971;
  r.truth_kind = "gaussian";
  r.truth_fwhm_mm = 3.0;
  r.scale = 2;
  r.seed = 7;
  r.psnr_peak = 1.25;
  auto j = sp::eval_report_to_json(r);
  sp::EvalReport back = sp::eval_report_from_json(j);
  REQUIRE(back.fwhm_est_mm == r.fwhm_est_mm);
  REQUIRE(back.truth_kind == r.truth_kind);
  REQUIRE(back.psnr_peak == r.psnr_peak);
  REQUIRE(back.scale == r.scale);
}
