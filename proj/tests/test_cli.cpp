#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "sliceprof/metrics.hpp"
#include "sliceprof/profile.hpp"
#include "sliceprof/simulate.hpp"
#include "sliceprof/volume.hpp"

namespace sp = sliceprof;
namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "sliceprof_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run_cli(const std::string& args, std::string* stderr_text = nullptr) {
  const fs::path err_file = work_dir() / "stderr.txt";
  const std::string cmd =
      std::string(SLICEPROF_CLI_PATH) + " " + args + " 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  if (stderr_text) {
    std::ifstream in(err_file);
    std::stringstream ss;
    ss << in.rdbuf();
    *stderr_text = ss.str();
  }
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return -1;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json load_json(const fs::path& p) {
  std::ifstream in(p);
  nlohmann::json j;
  in >> j;
  return j;
}

// Shared fixtures built once through the CLI itself.
struct Fixtures {
  fs::path phantom = work_dir() / "hr.raw";
  fs::path lr = work_dir() / "lr.raw";
  fs::path truth = work_dir() / "truth.json";
  Fixtures() {
    REQUIRE(run_cli("phantom --size 64 --seed 3 --out " + phantom.string()) == 0);
    REQUIRE(run_cli("simulate --in " + phantom.string() +
                    " --kind gaussian --fwhm 3 --scale 2 --out " + lr.string() + " --truth " +
                    truth.string()) == 0);
  }
};

const Fixtures& fixtures() {
  static Fixtures f;
  return f;
}

}  // namespace

TEST_CASE("phantom subcommand is deterministic and well-formed") {
  const auto dir = work_dir();
  const auto a = dir / "pa.raw", b = dir / "pb.raw";
  REQUIRE(run_cli("phantom --size 32 --seed 11 --out " + a.string()) == 0);
  REQUIRE(run_cli("phantom --size 32 --seed 11 --out " + b.string()) == 0);
  REQUIRE(file_bytes(a) == file_bytes(b));
  REQUIRE(file_bytes(dir / "pa.json") == file_bytes(dir / "pb.json"));

  sp::Volume v = sp::load_volume(a);
  REQUIRE(v.spacing_mm == std::array<double, 3>{1.0, 1.0, 1.0});
  REQUIRE(v.extents == std::array<std::size_t, 3>{32, 32, 32});

  SECTION("size below 32 is a usage error") {
    REQUIRE(run_cli("phantom --size 16 --seed 1 --out " + (dir / "small.raw").string()) == 64);
  }
}

TEST_CASE("simulate subcommand writes the degraded volume and the truth profile") {
  const auto& f = fixtures();
  sp::Volume hr = sp::load_volume(f.phantom);
  sp::Volume lr = sp::load_volume(f.lr);
  REQUIRE(lr.extents[0] == 64);
  REQUIRE(lr.extents[2] == (64 - 20 + 1) / 2);  // valid conv then ceil stride
  REQUIRE(lr.spacing_mm[2] == 2.0);

  sp::Profile truth = sp::load_profile_json(f.truth);
  REQUIRE(sp::fwhm(truth) == Catch::Approx(3.0).margin(0.08));
  REQUIRE(fs::exists(work_dir() / "truth.csv"));

  SECTION("the rect kind matches the area-sampled discretization") {
    const auto out = work_dir() / "lr_rect.raw";
    const auto truth_rect = work_dir() / "truth_rect.json";
    REQUIRE(run_cli("simulate --in " + f.phantom.string() +
                    " --kind rect --fwhm 3 --scale 2 --out " + out.string() + " --truth " +
                    truth_rect.string()) == 0);
    sp::Profile got = sp::load_profile_json(truth_rect);
    sp::Profile want = sp::make_profile({sp::ProfileKind::rect, 3.0, 1.0, 21});
    for (std::size_t i = 0; i < want.taps.size(); ++i) {
      REQUIRE(got.taps[i] == Catch::Approx(want.taps[i]).margin(1e-12));
    }
  }
  SECTION("an unsupported kind is a usage error") {
    REQUIRE(run_cli("simulate --in " + f.phantom.string() +
                    " --kind triangle --fwhm 3 --scale 2 --out x.raw") == 64);
  }
}

TEST_CASE("estimate subcommand is deterministic and honors --iters 0") {
  const auto& f = fixtures();
  const auto dir = work_dir();

  SECTION("same seed twice gives byte-identical outputs") {
    const auto k1 = dir / "k1.json", k2 = dir / "k2.json";
    const std::string base = "estimate --in " + f.lr.string() + " --iters 2 --batch 2 --seed 7 ";
    REQUIRE(run_cli(base + "--out " + k1.string()) == 0);
    REQUIRE(run_cli(base + "--out " + k2.string()) == 0);
    REQUIRE(file_bytes(k1) == file_bytes(k2));
    REQUIRE(file_bytes(dir / "k1.csv") == file_bytes(dir / "k2.csv"));
  }
  SECTION("zero iterations produce the near-impulse initialization") {
    const auto k0 = dir / "k0.json";
    REQUIRE(run_cli("estimate --in " + f.lr.string() + " --iters 0 --seed 7 --out " +
                    k0.string()) == 0);
    sp::Profile p = sp::load_profile_json(k0);
    REQUIRE(sp::fwhm(p) == Catch::Approx(1.0).margin(0.1));
  }
  SECTION("svg and history outputs are written") {
    const auto k = dir / "ksvg.json";
    REQUIRE(run_cli("estimate --in " + f.lr.string() + " --iters 2 --batch 2 --seed 7 --out " +
                    k.string() + " --svg " + (dir / "k.svg").string() + " --history " +
                    (dir / "hist.csv").string()) == 0);
    REQUIRE(fs::exists(dir / "k.svg"));
    std::ifstream hist(dir / "hist.csv");
    std::string header;
    std::getline(hist, header);
    REQUIRE(header == "iteration,l_adv_g,l_d,l_c,l_b,fwhm_mm");
  }
  SECTION("missing --in is a usage error") {
    REQUIRE(run_cli("estimate --out nothing.json") == 64);
  }
  SECTION("a nonexistent volume is a data error") {
    REQUIRE(run_cli("estimate --in /nonexistent.raw --out " + (dir / "x.json").string()) == 2);
  }
  SECTION("RNG_SEED provides the default seed") {
    const auto ka = dir / "env_a.json", kb = dir / "env_b.json", kc = dir / "env_c.json";
    const std::string base = "estimate --in " + f.lr.string() + " --iters 1 --batch 2 --out ";
    REQUIRE(std::system(("RNG_SEED=5 " + std::string(SLICEPROF_CLI_PATH) + " " + base +
                         ka.string() + " 2>/dev/null")
                            .c_str()) == 0);
    REQUIRE(run_cli(base + kb.string() + " --seed 5") == 0);
    REQUIRE(run_cli(base + kc.string() + " --seed 6") == 0);
    REQUIRE(file_bytes(ka) == file_bytes(kb));
    REQUIRE(file_bytes(ka) != file_bytes(kc));
  }
}

TEST_CASE("evaluate subcommand reports the four metrics") {
  const auto& f = fixtures();
  const auto dir = work_dir();
  const auto report = dir / "report_self.json";
  REQUIRE(run_cli("evaluate --truth " + f.truth.string() + " --est " + f.truth.string() +
                  " --hr " + f.phantom.string() + " --scale 2 --mask-frac 0.1 --out " +
                  report.string()) == 0);
  auto j = load_json(report);
  REQUIRE(j["fwhm_error_mm"].get<double>() == 0.0);
  REQUIRE(j["profile_error"].get<double>() == 0.0);
  REQUIRE(j["psnr_db"].get<double>() == 200.0);
  REQUIRE(j["ssim"].get<double>() == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(j["config"]["psnr_peak"].get<double>() > 0.0);

  SECTION("batch mode aggregates reports into a metric table") {
    const auto batch_dir = dir / "reports";
    fs::create_directories(batch_dir);
    fs::copy_file(report, batch_dir / "a.json", fs::copy_options::overwrite_existing);
    fs::copy_file(report, batch_dir / "b.json", fs::copy_options::overwrite_existing);
    const auto table = dir / "table.csv";
    REQUIRE(run_cli("evaluate --batch " + batch_dir.string() + " --out " + table.string()) == 0);
    std::ifstream in(table);
    std::string line;
    std::getline(in, line);
    REQUIRE(line.rfind("metric,", 0) == 0);
    int rows = 0;
    while (std::getline(in, line)) {
      if (!line.empty()) ++rows;
    }
    REQUIRE(rows == 4);
  }
  SECTION("an estimate on a different grid is a data error") {
    sp::Profile bad = sp::load_profile_json(f.truth);
    bad.spacing_mm *= 2.0;
    sp::save_profile_json(bad, dir / "bad_est.json");
    REQUIRE(run_cli("evaluate --truth " + f.truth.string() + " --est " +
                    (dir / "bad_est.json").string() + " --hr " + f.phantom.string() +
                    " --scale 2 --out " + (dir / "r.json").string()) == 2);
  }
}

TEST_CASE("measure subcommand reports FWHM statistics") {
  const auto& f = fixtures();
  const auto dir = work_dir();

  SECTION("repeat gives mean and sd fields") {
    const auto out = dir / "fwhm3.json";
    REQUIRE(run_cli("measure --in " + f.lr.string() + " --iters 1 --batch 2 --repeat 3 --seed 4 --out " +
                    out.string()) == 0);
    auto j = load_json(out);
    REQUIRE(j.contains("mean_mm"));
    REQUIRE(j.contains("sd_mm"));
    REQUIRE(j["repeats"].get<int>() == 3);
    REQUIRE(j["samples_mm"].size() == 3);
  }
  SECTION("a near-isotropic volume warns and measures the spacing") {
    const auto out = dir / "fwhm_iso.json";
    std::string err;
    REQUIRE(run_cli("measure --in " + f.phantom.string() + " --iters 0 --out " + out.string(),
                    &err) == 0);
    REQUIRE(err.find("isotropic") != std::string::npos);
    auto j = load_json(out);
    REQUIRE(j["fwhm_mm"].get<double>() == Catch::Approx(1.0).margin(0.1));
  }
}
