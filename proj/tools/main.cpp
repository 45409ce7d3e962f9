// Command-line interface: estimate, simulate, evaluate, measure, phantom.
#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sliceprof/errors.hpp"
#include "sliceprof/gan.hpp"
#include "sliceprof/metrics.hpp"
#include "sliceprof/profile.hpp"
#include "sliceprof/simulate.hpp"
#include "sliceprof/trainer.hpp"
#include "sliceprof/volume.hpp"

namespace fs = std::filesystem;
using namespace sliceprof;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDataError = 2;
constexpr int kExitNumericAbort = 3;
constexpr int kExitUsage = 64;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("RNG_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw value_error("RNG_SEED is not an unsigned integer: " + std::string(env));
    }
  }
  return 0;
}

fs::path with_extension(fs::path p, const char* ext) {
  p.replace_extension(ext);
  return p;
}

/// Minimal polyline plot of the profile taps with axis ticks.
void write_profile_svg(const Profile& profile, const fs::path& path) {
  const int width = 640, height = 400;
  const double ml = 56, mr = 16, mt = 16, mb = 44;
  const double pw = width - ml - mr, ph = height - mt - mb;
  double max_tap = 0.0;
  for (double t : profile.taps) max_tap = std::max(max_tap, t);
  if (max_tap <= 0.0) max_tap = 1.0;
  const double c = static_cast<double>(profile.center());
  const double x_min = -c * profile.spacing_mm, x_max = c * profile.spacing_mm;

  auto sx = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * pw; };
  auto sy = [&](double y) { return mt + (1.0 - y / max_tap) * ph; };

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
      << mt + ph << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
  for (int i = -2; i <= 2; ++i) {
    const double x = i * x_max / 2.0;
    out << "<line x1=\"" << sx(x) << "\" y1=\"" << mt + ph << "\" x2=\"" << sx(x) << "\" y2=\""
        << mt + ph + 5 << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << sx(x) << "\" y=\"" << mt + ph + 20
        << "\" font-size=\"11\" text-anchor=\"middle\">" << x << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double y = max_tap * i / 4.0;
    out << "<line x1=\"" << ml - 5 << "\" y1=\"" << sy(y) << "\" x2=\"" << ml << "\" y2=\""
        << sy(y) << "\" stroke=\"black\"/>\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", y);
    out << "<text x=\"" << ml - 8 << "\" y=\"" << sy(y) + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << buf << "</text>\n";
  }
  out << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
      << "\" font-size=\"12\" text-anchor=\"middle\">offset (mm)</text>\n";
  out << "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < profile.taps.size(); ++i) {
    const double x = (static_cast<double>(i) - c) * profile.spacing_mm;
    out << sx(x) << ',' << sy(profile.taps[i]) << ' ';
  }
  out << "\"/>\n</svg>\n";
  if (!out) throw io_error("short write to " + path.string());
}

struct EstimateArgs {
  std::string in_path, out_path;
  std::int64_t iters = 15000;
  std::size_t batch = 64;
  std::size_t scale = 0;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string checkpoint, history, svg;
};

Profile run_estimation(const EstimateArgs& args, const Volume& volume, double* out_spacing,
                       std::vector<HistoryRow>* out_history) {
  TrainConfig config;
  config.iterations = args.iters;
  config.batch_size = args.batch;
  config.scale = args.scale;
  config.seed = args.seed_given ? args.seed : default_seed();

  TrainState state;
  bool resumed = false;
  if (!args.checkpoint.empty() && fs::exists(args.checkpoint)) {
    state = checkpoint_load(args.checkpoint);
    resumed = true;
    std::cerr << "resuming from " << args.checkpoint << " at iteration " << state.iteration
              << "\n";
  } else {
    state = init_train_state(volume, config);
  }
  if (state.config.scale == 1) {
    std::cerr << "warning: volume is nearly isotropic (scale factor 1); the estimate reflects "
                 "only residual through-plane blur\n";
  }
  const std::int64_t target = resumed ? std::max<std::int64_t>(args.iters, state.iteration)
                                      : state.config.iterations;
  run_training(volume, state, target, [](const HistoryRow& row) {
    std::fprintf(stderr, "iter %6lld  L_adv(G) %+.4f  L(D) %.4f  L_c %.5f  L_b %.5f  fwhm %.3f mm\n",
                 static_cast<long long>(row.iteration), row.l_adv_g, row.l_d, row.l_c, row.l_b,
                 row.fwhm_mm);
  });
  if (!args.checkpoint.empty()) checkpoint_save(state, args.checkpoint);
  if (out_spacing) *out_spacing = state.hr_spacing_mm;
  if (out_history) *out_history = state.history.rows();
  return state.ema;
}

int cmd_estimate(const EstimateArgs& args) {
  const Volume volume = load_volume(args.in_path);
  std::vector<HistoryRow> history;
  const Profile profile = run_estimation(args, volume, nullptr, &history);
  save_profile_json(profile, args.out_path);
  save_profile_csv(profile, with_extension(args.out_path, ".csv"));
  if (!args.svg.empty()) write_profile_svg(profile, args.svg);
  if (!args.history.empty()) save_history_csv(history, args.history);
  return kExitOk;
}

int cmd_simulate(const std::string& in_path, const std::string& kind, double fwhm_mm,
                 std::size_t scale, const std::string& out_path, const std::string& truth_path,
                 std::size_t support) {
  const Volume hr = load_volume(in_path);
  TruthProfileSpec spec;
  spec.kind = kind == "rect" ? ProfileKind::rect : ProfileKind::gaussian;
  spec.fwhm_mm = fwhm_mm;
  spec.spacing_mm = hr.spacing_mm[2];
  spec.support = support;
  const Profile truth = make_profile(spec);
  const Volume lr = degrade_volume(hr, truth, scale);
  save_volume(lr, out_path);
  if (!truth_path.empty()) {
    save_profile_json(truth, truth_path);
    save_profile_csv(truth, with_extension(truth_path, ".csv"));
  }
  return kExitOk;
}

int cmd_evaluate(const std::string& truth_path, const std::string& est_path,
                 const std::string& hr_path, std::size_t scale, double mask_frac,
                 const std::string& out_path, std::uint64_t seed) {
  const Profile truth = load_profile_json(truth_path);
  const Profile estimate = load_profile_json(est_path);
  const Volume hr = load_volume(hr_path);

  EvalReport report;
  report.fwhm_true_mm = fwhm(truth);
  report.fwhm_est_mm = fwhm(estimate);
  report.fwhm_error_mm = std::abs(report.fwhm_true_mm - report.fwhm_est_mm);
  report.profile_error = profile_error(truth, estimate);

  const Volume by_truth = degrade_volume(hr, truth, scale);
  const Volume by_estimate = degrade_volume(hr, estimate, scale);
  const Mask mask = head_mask(by_truth, mask_frac);
  if (mask.count() == 0) throw data_error("evaluate: head mask is empty");
  report.psnr_db = psnr(by_truth, by_estimate, mask);
  report.ssim = ssim(by_truth, by_estimate, mask);
  {
    double peak = 0.0;
    for (std::size_t i = 0; i < mask.values.size(); ++i) {
      if (mask.values[i]) peak = std::max(peak, static_cast<double>(by_truth.values[i]));
    }
    report.psnr_peak = peak;
  }
  report.truth_kind = "unknown";
  report.truth_fwhm_mm = report.fwhm_true_mm;
  report.scale = scale;
  report.seed = seed;
  report.mask_fraction = mask_frac;

  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + out_path + " for writing");
  out << eval_report_to_json(report).dump(2) << '\n';
  return kExitOk;
}

int cmd_evaluate_batch(const std::string& dir, const std::string& out_path) {
  std::vector<std::pair<std::string, EvalReport>> reports;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    nlohmann::json j;
    try {
      in >> j;
      reports.emplace_back(entry.path().stem().string(), eval_report_from_json(j));
    } catch (const std::exception&) {
      continue;  // not an evaluation report
    }
  }
  if (reports.empty()) throw data_error("evaluate --batch: no evaluation reports in " + dir);
  std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) {
    const EvalReport &ra = a.second, &rb = b.second;
    return std::tie(ra.truth_kind, ra.truth_fwhm_mm, ra.scale) <
           std::tie(rb.truth_kind, rb.truth_fwhm_mm, rb.scale);
  });

  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + out_path + " for writing");
  out << "metric";
  for (const auto& [name, r] : reports) {
    out << ',' << r.truth_kind << '-' << r.truth_fwhm_mm << "mm-x" << r.scale;
  }
  out << '\n';
  auto row = [&](const char* label, auto getter) {
    out << label;
    for (const auto& [name, r] : reports) out << ',' << getter(r);
    out << '\n';
  };
  row("fwhm_error_mm", [](const EvalReport& r) { return r.fwhm_error_mm; });
  row("profile_error", [](const EvalReport& r) { return r.profile_error; });
  row("psnr_db", [](const EvalReport& r) { return r.psnr_db; });
  row("ssim", [](const EvalReport& r) { return r.ssim; });
  return kExitOk;
}

int cmd_measure(const EstimateArgs& base, int repeats, const std::string& out_path) {
  const Volume volume = load_volume(base.in_path);
  std::vector<double> fwhm_mm;
  double spacing = volume.spacing_mm[0];
  for (int r = 0; r < repeats; ++r) {
    EstimateArgs args = base;
    args.seed = (base.seed_given ? base.seed : default_seed()) + static_cast<std::uint64_t>(r);
    args.seed_given = true;
    args.checkpoint.clear();
    const Profile profile = run_estimation(args, volume, &spacing, nullptr);
    fwhm_mm.push_back(fwhm(profile));
    std::cerr << "repeat " << r << ": fwhm " << fwhm_mm.back() << " mm\n";
  }
  double mean = 0.0;
  for (double v : fwhm_mm) mean += v;
  mean /= static_cast<double>(fwhm_mm.size());
  double sd = 0.0;
  if (fwhm_mm.size() > 1) {
    for (double v : fwhm_mm) sd += (v - mean) * (v - mean);
    sd = std::sqrt(sd / static_cast<double>(fwhm_mm.size() - 1));
  }

  nlohmann::json j{{"fwhm_mm", mean},
                   {"fwhm_voxels", mean / spacing},
                   {"spacing_mm", spacing},
                   {"repeats", repeats}};
  if (repeats > 1) {
    j["mean_mm"] = mean;
    j["sd_mm"] = sd;
    j["mean_voxels"] = mean / spacing;
    j["sd_voxels"] = sd / spacing;
    j["samples_mm"] = fwhm_mm;
  }
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + out_path + " for writing");
  out << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_phantom(std::size_t size, std::uint64_t seed, const std::string& out_path, double corr) {
  save_volume(make_phantom(seed, {size, size, size}, corr), out_path);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blind through-plane blur-kernel estimation for anisotropic 3D volumes"};
  app.require_subcommand(1);

  EstimateArgs est;
  auto* estimate = app.add_subcommand("estimate", "Estimate the relative slice profile of a volume");
  estimate->add_option("--in", est.in_path, "input volume")->required();
  estimate->add_option("--out", est.out_path, "output profile JSON (CSV written alongside)")
      ->required();
  estimate->add_option("--iters", est.iters, "training iterations")->check(CLI::NonNegativeNumber);
  estimate->add_option("--batch", est.batch, "mini-batch size")->check(CLI::PositiveNumber);
  estimate->add_option("--scale", est.scale, "integer scale factor (default: from header)");
  auto* seed_opt = estimate->add_option("--seed", est.seed, "RNG seed (default: $RNG_SEED or 0)");
  estimate->add_option("--checkpoint", est.checkpoint, "checkpoint file (resume if it exists)");
  estimate->add_option("--history", est.history, "write loss history CSV");
  estimate->add_option("--svg", est.svg, "write an SVG plot of the profile");

  std::string sim_in, sim_kind, sim_out, sim_truth;
  double sim_fwhm = 3.0;
  std::size_t sim_scale = 2, sim_support = 21;
  auto* simulate = app.add_subcommand("simulate", "Blur and downsample a volume along z");
  simulate->add_option("--in", sim_in, "high-resolution input volume")->required();
  simulate->add_option("--kind", sim_kind, "profile kind")
      ->required()
      ->check(CLI::IsMember({"gaussian", "rect"}));
  simulate->add_option("--fwhm", sim_fwhm, "FWHM in mm")->required()->check(CLI::PositiveNumber);
  simulate->add_option("--scale", sim_scale, "downsampling factor")->check(CLI::PositiveNumber);
  simulate->add_option("--out", sim_out, "output low-resolution volume")->required();
  simulate->add_option("--truth", sim_truth, "write the true profile JSON here");
  simulate->add_option("--support", sim_support, "profile support taps (odd)");

  std::string ev_truth, ev_est, ev_hr, ev_out, ev_batch;
  std::size_t ev_scale = 2;
  double ev_mask_frac = 0.1;
  std::uint64_t ev_seed = 0;
  auto* evaluate = app.add_subcommand("evaluate", "Compare estimated and true profiles");
  evaluate->add_option("--truth", ev_truth, "true profile JSON");
  evaluate->add_option("--est", ev_est, "estimated profile JSON");
  evaluate->add_option("--hr", ev_hr, "high-resolution volume to degrade");
  evaluate->add_option("--scale", ev_scale, "downsampling factor");
  evaluate->add_option("--mask-frac", ev_mask_frac, "head-mask threshold fraction");
  evaluate->add_option("--out", ev_out, "output report JSON / batch CSV")->required();
  evaluate->add_option("--batch", ev_batch, "aggregate report JSONs from this directory");
  evaluate->add_option("--seed", ev_seed, "seed echoed into the report");

  EstimateArgs meas;
  int meas_repeat = 1;
  std::string meas_out;
  auto* measure = app.add_subcommand("measure", "Estimate and report the through-plane FWHM");
  measure->add_option("--in", meas.in_path, "input volume")->required();
  measure->add_option("--out", meas_out, "output JSON")->required();
  measure->add_option("--repeat", meas_repeat, "independent runs (mean and SD)")
      ->check(CLI::PositiveNumber);
  measure->add_option("--iters", meas.iters, "training iterations")->check(CLI::NonNegativeNumber);
  measure->add_option("--batch", meas.batch, "mini-batch size")->check(CLI::PositiveNumber);
  measure->add_option("--scale", meas.scale, "integer scale factor (default: from header)");
  auto* meas_seed_opt = measure->add_option("--seed", meas.seed, "base RNG seed");

  std::size_t ph_size = 96;
  std::uint64_t ph_seed = 0;
  std::string ph_out;
  double ph_corr = 2.0;
  auto* phantom = app.add_subcommand("phantom", "Write a procedural isotropic test volume");
  phantom->add_option("--size", ph_size, "cubic extent (>= 32)")
      ->required()
      ->check(CLI::Range(static_cast<std::size_t>(32), static_cast<std::size_t>(4096)));
  phantom->add_option("--seed", ph_seed, "RNG seed");
  phantom->add_option("--out", ph_out, "output volume path")->required();
  phantom->add_option("--corr", ph_corr, "correlation length in voxels")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (estimate->parsed()) {
      est.seed_given = seed_opt->count() > 0;
      return cmd_estimate(est);
    }
    if (simulate->parsed()) {
      return cmd_simulate(sim_in, sim_kind, sim_fwhm, sim_scale, sim_out, sim_truth, sim_support);
    }
    if (evaluate->parsed()) {
      if (!ev_batch.empty()) return cmd_evaluate_batch(ev_batch, ev_out);
      if (ev_truth.empty() || ev_est.empty() || ev_hr.empty()) {
        std::cerr << "evaluate: --truth, --est and --hr are required (or use --batch)\n";
        return kExitUsage;
      }
      return cmd_evaluate(ev_truth, ev_est, ev_hr, ev_scale, ev_mask_frac, ev_out, ev_seed);
    }
    if (measure->parsed()) {
      meas.seed_given = meas_seed_opt->count() > 0;
      return cmd_measure(meas, meas_repeat, meas_out);
    }
    if (phantom->parsed()) {
      return cmd_phantom(ph_size, ph_seed, ph_out, ph_corr);
    }
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumericAbort;
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDataError;
  }
  return kExitUsage;
}
