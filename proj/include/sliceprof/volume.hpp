#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sliceprof/errors.hpp"
#include "sliceprof/filters.hpp"
#include "sliceprof/rng.hpp"

namespace sliceprof {

/// 3D scalar grid with per-axis spacing, stored x-fastest as float32.
struct Volume {
  std::array<std::size_t, 3> extents{0, 0, 0};  ///< nx, ny, nz
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::vector<float> values;

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + extents[0] * (y + extents[1] * z);
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return values[index(x, y, z)]; }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return values[index(x, y, z)]; }
  std::size_t numel() const { return extents[0] * extents[1] * extents[2]; }

  static Volume zeros(std::array<std::size_t, 3> extents, std::array<double, 3> spacing_mm) {
    Volume v;
    v.extents = extents;
    v.spacing_mm = spacing_mm;
    v.values.assign(extents[0] * extents[1] * extents[2], 0.0f);
    return v;
  }
};

struct Mask {
  std::array<std::size_t, 3> extents{0, 0, 0};
  std::vector<std::uint8_t> values;

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : values) n += v != 0;
    return n;
  }
};

/// Linear-interpolation percentile (p in [0,100]) of the voxel values.
inline double percentile(const Volume& volume, double p) {
  if (volume.values.empty()) throw value_error("percentile: empty volume");
  std::vector<float> sorted = volume.values;
  std::sort(sorted.begin(), sorted.end());
  const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return (1.0 - frac) * sorted[lo] + frac * sorted[hi];
}

namespace detail {

inline std::filesystem::path sidecar_path(const std::filesystem::path& data_path) {
  std::filesystem::path p = data_path;
  p.replace_extension(".json");
  return p;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw io_error("cannot read " + path.string());
  return bytes;
}

template <typename T>
T read_le(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

inline Volume load_nifti(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) {
    throw format_error(path.string() + ": compressed files are not supported");
  }
  if (bytes.size() < 348) throw format_error(path.string() + ": header shorter than 348 bytes");
  const auto sizeof_hdr = read_le<std::int32_t>(bytes, 0);
  if (sizeof_hdr != 348) {
    // 348 byte-swapped is 0x5c010000
    if (sizeof_hdr == 0x5c010000) {
      throw format_error(path.string() + ": big-endian files are not supported");
    }
    throw format_error(path.string() + ": unknown magic bytes (sizeof_hdr=" +
                       std::to_string(sizeof_hdr) + ")");
  }
  char magic[4];
  std::memcpy(magic, bytes.data() + 344, 4);
  if (std::memcmp(magic, "n+1", 4) != 0) {
    if (std::memcmp(magic, "ni1", 4) == 0) {
      throw format_error(path.string() + ": two-file (.hdr/.img) variant is not supported");
    }
    throw format_error(path.string() + ": unknown magic bytes");
  }

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[static_cast<std::size_t>(i)] = read_le<std::int16_t>(bytes, 40 + 2 * static_cast<std::size_t>(i));
  if (dim[0] < 3 || dim[0] > 7) {
    throw format_error(path.string() + ": expected a 3D image, dim[0]=" + std::to_string(dim[0]));
  }
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[static_cast<std::size_t>(i)] > 1) {
      throw format_error(path.string() + ": non-singleton dimension " + std::to_string(i) +
                         " is not supported");
    }
  }
  const std::size_t nx = static_cast<std::size_t>(dim[1]);
  const std::size_t ny = static_cast<std::size_t>(dim[2]);
  const std::size_t nz = static_cast<std::size_t>(dim[3]);
  if (nx < 1 || ny < 1 || nz < 1) throw format_error(path.string() + ": degenerate extents");

  const auto datatype = read_le<std::int16_t>(bytes, 70);
  if (datatype != 4 && datatype != 16) {
    throw format_error(path.string() + ": datatype " + std::to_string(datatype) +
                       " is not supported (int16 and float32 only)");
  }
  const std::size_t elem = datatype == 4 ? 2 : 4;

  Volume volume;
  volume.extents = {nx, ny, nz};
  for (int i = 0; i < 3; ++i) {
    const float s = read_le<float>(bytes, 76 + 4 * (static_cast<std::size_t>(i) + 1));
    if (!(s > 0.0f)) throw format_error(path.string() + ": non-positive pixel dimension");
    volume.spacing_mm[static_cast<std::size_t>(i)] = s;
  }

  const float vox_offset_f = read_le<float>(bytes, 108);
  const std::size_t vox_offset = static_cast<std::size_t>(vox_offset_f);
  if (vox_offset < 348 || static_cast<float>(vox_offset) != vox_offset_f) {
    throw format_error(path.string() + ": unsupported vox_offset");
  }
  const std::size_t n = nx * ny * nz;
  if (bytes.size() < vox_offset + n * elem) {
    throw data_error(path.string() + ": data section truncated (" +
                     std::to_string(bytes.size() - std::min(bytes.size(), vox_offset)) +
                     " bytes, need " + std::to_string(n * elem) + ")");
  }

  const float scl_slope = read_le<float>(bytes, 112);
  const float scl_inter = read_le<float>(bytes, 116);
  const bool rescale = scl_slope != 0.0f && (scl_slope != 1.0f || scl_inter != 0.0f);

  volume.values.resize(n);
  if (datatype == 4) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto raw = read_le<std::int16_t>(bytes, vox_offset + 2 * i);
      volume.values[i] = rescale ? scl_slope * static_cast<float>(raw) + scl_inter
                                 : static_cast<float>(raw);
    }
  } else {
    std::memcpy(volume.values.data(), bytes.data() + vox_offset, n * 4);
    if (rescale) {
      for (float& v : volume.values) v = scl_slope * v + scl_inter;
    }
  }
  return volume;
}

inline Volume load_raw(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side)) {
    throw format_error(path.string() + ": missing sidecar " + side.string());
  }
  nlohmann::json meta;
  {
    std::ifstream in(side);
    if (!in) throw io_error("cannot open " + side.string());
    try {
      in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw data_error(side.string() + ": " + e.what());
    }
  }
  Volume volume;
  try {
    const auto ext = meta.at("extents");
    const auto sp = meta.at("spacing_mm");
    if (ext.size() != 3 || sp.size() != 3) throw data_error(side.string() + ": need 3 extents and 3 spacings");
    for (std::size_t i = 0; i < 3; ++i) {
      volume.extents[i] = ext[i].get<std::size_t>();
      volume.spacing_mm[i] = sp[i].get<double>();
      if (volume.extents[i] < 1) throw data_error(side.string() + ": extents must be >= 1");
      if (!(volume.spacing_mm[i] > 0)) throw data_error(side.string() + ": spacings must be > 0");
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error(side.string() + ": " + e.what());
  }
  const auto bytes = read_file_bytes(path);
  const std::size_t n = volume.numel();
  if (bytes.size() != n * 4) {
    throw data_error(path.string() + ": data length " + std::to_string(bytes.size()) +
                     " does not match header (" + std::to_string(n * 4) + " bytes expected)");
  }
  volume.values.resize(n);
  std::memcpy(volume.values.data(), bytes.data(), n * 4);
  return volume;
}

}  // namespace detail

/// Loads a volume. `.nii` files use the read-only neuroimaging reader;
/// anything else is the raw float32 + JSON sidecar format.
inline Volume load_volume(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw io_error(path.string() + ": no such file");
  if (path.extension() == ".nii") return detail::load_nifti(path);
  if (path.extension() == ".gz") throw format_error(path.string() + ": compressed files are not supported");
  return detail::load_raw(path);
}

/// Writes the raw float32 + JSON sidecar pair. The neuroimaging format is
/// read-only and rejected here.
inline void save_volume(const Volume& volume, const std::filesystem::path& path) {
  if (path.extension() == ".nii") {
    throw format_error("save_volume: .nii output is not supported; use the raw+sidecar format");
  }
  if (volume.numel() != volume.values.size()) throw shape_error("save_volume: inconsistent volume");
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(volume.values.data()),
              static_cast<std::streamsize>(volume.values.size() * 4));
    if (!out) throw io_error("short write to " + path.string());
  }
  nlohmann::json meta;
  meta["extents"] = {volume.extents[0], volume.extents[1], volume.extents[2]};
  meta["spacing_mm"] = {volume.spacing_mm[0], volume.spacing_mm[1], volume.spacing_mm[2]};
  const auto side = detail::sidecar_path(path);
  std::ofstream out(side, std::ios::trunc);
  if (!out) throw io_error("cannot open " + side.string() + " for writing");
  out << meta.dump(2) << '\n';
  if (!out) throw io_error("short write to " + side.string());
}

/// Foreground mask: threshold at fraction * (99th percentile), then one pass
/// of 6-connected morphological closing. An all-nonpositive volume gives an
/// empty mask.
inline Mask head_mask(const Volume& volume, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw value_error("head_mask: fraction must be in (0,1)");
  Mask mask;
  mask.extents = volume.extents;
  mask.values.assign(volume.numel(), 0);
  const double p99 = percentile(volume, 99.0);
  if (!(p99 > 0.0)) return mask;
  const double threshold = fraction * p99;
  const auto [nx, ny, nz] = volume.extents;
  for (std::size_t i = 0; i < volume.values.size(); ++i) {
    mask.values[i] = volume.values[i] >= threshold ? 1 : 0;
  }
  auto neighbor_pass = [&](const std::vector<std::uint8_t>& src, bool dilate) {
    std::vector<std::uint8_t> dst(src.size());
    for (std::size_t z = 0; z < nz; ++z) {
      for (std::size_t y = 0; y < ny; ++y) {
        for (std::size_t x = 0; x < nx; ++x) {
          const std::size_t i = volume.index(x, y, z);
          bool any = src[i] != 0, all = src[i] != 0;
          auto visit = [&](std::size_t j) {
            any = any || src[j] != 0;
            all = all && src[j] != 0;
          };
          if (x > 0) visit(i - 1);
          if (x + 1 < nx) visit(i + 1);
          if (y > 0) visit(i - nx);
          if (y + 1 < ny) visit(i + nx);
          if (z > 0) visit(i - nx * ny);
          if (z + 1 < nz) visit(i + nx * ny);
          dst[i] = dilate ? (any ? 1 : 0) : (all ? 1 : 0);
        }
      }
    }
    return dst;
  };
  mask.values = neighbor_pass(neighbor_pass(mask.values, true), false);
  return mask;
}

enum class PatchPlane { xz, yz };
enum class AxisRole { low_res, high_res };

/// 2D extract whose rows run along the low-resolution z axis and whose
/// columns run along a high-resolution in-plane axis.
struct Patch {
  std::size_t rows = 0, cols = 0;
  PatchPlane plane = PatchPlane::xz;
  AxisRole row_role = AxisRole::low_res;
  AxisRole col_role = AxisRole::high_res;
  std::vector<double> values;  // row-major [rows, cols]

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
};

struct PatchGeometry {
  std::size_t rows = 0;  ///< extent along z
  std::size_t cols = 0;  ///< extent along x or y
};

/// Normalized sampling weights over valid patch centers, with the cumulative
/// array used for inverse-CDF draws.
struct SampleWeights {
  PatchGeometry geometry;
  std::array<std::size_t, 3> extents{0, 0, 0};
  std::vector<std::size_t> centers;  ///< linear voxel index per valid center
  std::vector<double> weights;       ///< normalized to sum 1
  std::vector<double> cdf;           ///< inclusive prefix sums of weights
};

/// Smoothed gradient-magnitude sampling weights restricted to centers whose
/// patch footprint fits for both the xz and yz planes.
inline SampleWeights gradient_weights(const Volume& volume, PatchGeometry geometry) {
  const auto [nx, ny, nz] = volume.extents;
  const std::size_t rows = geometry.rows, cols = geometry.cols;
  if (rows < 1 || cols < 1) throw value_error("gradient_weights: empty patch geometry");
  if (nx < cols || ny < cols || nz < rows) {
    throw shape_error("gradient_weights: volume " + std::to_string(nx) + "x" + std::to_string(ny) +
                      "x" + std::to_string(nz) + " cannot host a patch; need at least " +
                      std::to_string(cols) + "x" + std::to_string(cols) + "x" +
                      std::to_string(rows));
  }

  std::vector<double> magnitude(volume.numel());
  auto diff = [&](std::size_t x, std::size_t y, std::size_t z, int axis) {
    const std::size_t c[3] = {x, y, z};
    const std::size_t n[3] = {nx, ny, nz};
    std::size_t lo[3] = {x, y, z}, hi[3] = {x, y, z};
    const std::size_t a = static_cast<std::size_t>(axis);
    if (c[a] > 0) lo[a] = c[a] - 1;
    if (c[a] + 1 < n[a]) hi[a] = c[a] + 1;
    const double span = static_cast<double>(hi[a] - lo[a]);
    if (span == 0.0) return 0.0;
    return (static_cast<double>(volume.at(hi[0], hi[1], hi[2])) -
            static_cast<double>(volume.at(lo[0], lo[1], lo[2]))) /
           span;
  };
  for (std::size_t z = 0; z < nz; ++z) {
    for (std::size_t y = 0; y < ny; ++y) {
      for (std::size_t x = 0; x < nx; ++x) {
        const double gx = diff(x, y, z, 0), gy = diff(x, y, z, 1), gz = diff(x, y, z, 2);
        magnitude[volume.index(x, y, z)] = std::sqrt(gx * gx + gy * gy + gz * gz);
      }
    }
  }
  gaussian_smooth3d(magnitude, volume.extents, 1.0, 3);

  SampleWeights out;
  out.geometry = geometry;
  out.extents = volume.extents;
  const std::size_t half_r = rows / 2, half_c = cols / 2;
  for (std::size_t cz = half_r; cz + (rows - half_r) <= nz; ++cz) {
    for (std::size_t cy = half_c; cy + (cols - half_c) <= ny; ++cy) {
      for (std::size_t cx = half_c; cx + (cols - half_c) <= nx; ++cx) {
        const std::size_t i = volume.index(cx, cy, cz);
        out.centers.push_back(i);
        out.weights.push_back(magnitude[i]);
      }
    }
  }
  double total = 0.0;
  for (double w : out.weights) total += w;
  if (total <= 0.0) {
    const double uniform = 1.0 / static_cast<double>(out.weights.size());
    std::fill(out.weights.begin(), out.weights.end(), uniform);
  } else {
    for (double& w : out.weights) w /= total;
  }
  out.cdf.resize(out.weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < out.weights.size(); ++i) {
    acc += out.weights[i];
    out.cdf[i] = acc;
  }
  out.cdf.back() = 1.0;
  return out;
}

/// Draws one patch; the center comes from an inverse-CDF lookup on `weights`.
inline Patch sample_patch(const Volume& volume, const SampleWeights& weights, Rng& rng,
                          PatchPlane plane, std::size_t rows, std::size_t cols) {
  if (weights.geometry.rows != rows || weights.geometry.cols != cols) {
    throw value_error("sample_patch: patch size does not match the sampling weights");
  }
  if (weights.extents != volume.extents) {
    throw value_error("sample_patch: weights were built for a different volume");
  }
  const double u = rng.uniform01();
  const auto it = std::upper_bound(weights.cdf.begin(), weights.cdf.end(), u);
  const std::size_t pick = std::min<std::size_t>(
      static_cast<std::size_t>(it - weights.cdf.begin()), weights.centers.size() - 1);
  const std::size_t linear = weights.centers[pick];
  const auto [nx, ny, nz] = volume.extents;
  const std::size_t cx = linear % nx;
  const std::size_t cy = (linear / nx) % ny;
  const std::size_t cz = linear / (nx * ny);

  Patch patch;
  patch.rows = rows;
  patch.cols = cols;
  patch.plane = plane;
  patch.values.resize(rows * cols);
  const std::size_t z0 = cz - rows / 2;
  if (plane == PatchPlane::xz) {
    const std::size_t x0 = cx - cols / 2;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        patch.values[r * cols + c] = volume.at(x0 + c, cy, z0 + r);
      }
    }
  } else {
    const std::size_t y0 = cy - cols / 2;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        patch.values[r * cols + c] = volume.at(cx, y0 + c, z0 + r);
      }
    }
  }
  return patch;
}

/// Copy of `volume` rescaled so its 99th percentile equals 1. A volume with a
/// nonpositive 99th percentile is returned unchanged.
inline Volume normalized_for_training(const Volume& volume) {
  const double p99 = percentile(volume, 99.0);
  Volume out = volume;
  if (p99 > 0.0) {
    const float inv = static_cast<float>(1.0 / p99);
    for (float& v : out.values) v *= inv;
  }
  return out;
}

/// Validates the spacing contract of the estimation path: s_x == s_y within
/// 1e-6 and s_z >= s_x.
inline void check_estimation_spacing(const Volume& volume) {
  const double sx = volume.spacing_mm[0], sy = volume.spacing_mm[1], sz = volume.spacing_mm[2];
  if (std::abs(sx - sy) > 1e-6 * std::max(sx, sy)) {
    throw value_error("volume: in-plane spacings differ (" + std::to_string(sx) + " vs " +
                      std::to_string(sy) + ")");
  }
  if (sz < sx - 1e-6 * sx) {
    throw value_error("volume: through-plane spacing is finer than in-plane");
  }
}

}  // namespace sliceprof
