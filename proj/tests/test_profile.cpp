#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "sliceprof/profile.hpp"

namespace sp = sliceprof;
namespace fs = std::filesystem;

namespace {

sp::Profile random_profile(unsigned seed, std::size_t k) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  sp::Profile p;
  p.spacing_mm = 0.797 + dist(rng);
  p.taps.resize(k);
  double sum = 0.0;
  for (double& t : p.taps) {
    t = dist(rng);
    sum += t;
  }
  for (double& t : p.taps) t /= sum;
  return p;
}

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / "sliceprof_profile_tests";
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("profile validation enforces the invariants") {
  sp::Profile ok = random_profile(1, 21);
  REQUIRE_NOTHROW(sp::assert_valid(ok));

  sp::Profile even = ok;
  even.taps.pop_back();
  REQUIRE_THROWS_AS(sp::assert_valid(even), sp::value_error);

  sp::Profile negative = ok;
  negative.taps[0] = -negative.taps[0];
  REQUIRE_THROWS_AS(sp::assert_valid(negative), sp::value_error);

  sp::Profile unnormalized = ok;
  unnormalized.taps[0] += 1e-6;
  REQUIRE_THROWS_AS(sp::assert_valid(unnormalized), sp::value_error);
}

TEST_CASE("profile JSON and CSV round-trips are bit exact") {
  const auto dir = temp_dir();
  for (unsigned seed = 0; seed < 20; ++seed) {
    sp::Profile p = random_profile(seed, 21);
    SECTION("json seed " + std::to_string(seed)) {
      sp::save_profile_json(p, dir / "p.json");
      sp::Profile r = sp::load_profile_json(dir / "p.json");
      REQUIRE(r.spacing_mm == p.spacing_mm);
      REQUIRE(r.taps == p.taps);
    }
    SECTION("csv seed " + std::to_string(seed)) {
      sp::save_profile_csv(p, dir / "p.csv");
      sp::Profile r = sp::load_profile_csv(dir / "p.csv");
      REQUIRE(r.taps == p.taps);
      REQUIRE(r.spacing_mm == Catch::Approx(p.spacing_mm).epsilon(1e-12));
    }
  }
}
