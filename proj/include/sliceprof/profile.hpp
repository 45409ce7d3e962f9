#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "sliceprof/errors.hpp"

namespace sliceprof {

/// Discrete 1D kernel: nonnegative taps summing to 1, odd length, sampled at
/// the in-plane spacing.
struct Profile {
  std::vector<double> taps;
  double spacing_mm = 1.0;

  std::size_t size() const { return taps.size(); }
  std::size_t center() const { return (taps.size() - 1) / 2; }
};

inline void assert_valid(const Profile& profile) {
  if (profile.taps.empty() || profile.taps.size() % 2 == 0) {
    throw value_error("profile: tap count must be odd and nonzero, got " +
                      std::to_string(profile.taps.size()));
  }
  if (!(profile.spacing_mm > 0.0)) throw value_error("profile: spacing must be > 0");
  double sum = 0.0;
  for (double t : profile.taps) {
    if (!(t >= 0.0)) throw value_error("profile: negative tap");
    sum += t;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw value_error("profile: taps sum to " + std::to_string(sum) + ", expected 1");
  }
}

namespace detail {

/// Shortest decimal form that round-trips the double exactly.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& text) {
  double v = 0.0;
  const char* begin = text.data();
  const char* end = text.data() + text.size();
  while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
  const auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc{}) throw data_error("cannot parse number: '" + text + "'");
  return v;
}

}  // namespace detail

inline nlohmann::json profile_to_json(const Profile& profile) {
  return nlohmann::json{{"spacing_mm", profile.spacing_mm}, {"taps", profile.taps}};
}

inline Profile profile_from_json(const nlohmann::json& j) {
  Profile p;
  try {
    p.spacing_mm = j.at("spacing_mm").get<double>();
    p.taps = j.at("taps").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("profile json: ") + e.what());
  }
  return p;
}

inline void save_profile_json(const Profile& profile, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << profile_to_json(profile).dump(2) << '\n';
  if (!out) throw io_error("short write to " + path.string());
}

inline Profile load_profile_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw data_error(path.string() + ": " + e.what());
  }
  return profile_from_json(j);
}

/// Two-column CSV (offset_mm, weight); offsets are centered on the middle tap.
inline void save_profile_csv(const Profile& profile, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "offset_mm,weight\n";
  const double c = static_cast<double>(profile.center());
  for (std::size_t i = 0; i < profile.taps.size(); ++i) {
    const double offset = (static_cast<double>(i) - c) * profile.spacing_mm;
    out << detail::format_double(offset) << ',' << detail::format_double(profile.taps[i]) << '\n';
  }
  if (!out) throw io_error("short write to " + path.string());
}

inline Profile load_profile_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw data_error(path.string() + ": empty file");
  Profile p;
  std::vector<double> offsets;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw data_error(path.string() + ": malformed row '" + line + "'");
    offsets.push_back(detail::parse_double(line.substr(0, comma)));
    p.taps.push_back(detail::parse_double(line.substr(comma + 1)));
  }
  if (offsets.size() < 2) throw data_error(path.string() + ": need at least two taps");
  p.spacing_mm = offsets[1] - offsets[0];
  return p;
}

}  // namespace sliceprof
