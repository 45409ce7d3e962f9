#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sliceprof/errors.hpp"
#include "sliceprof/gan.hpp"
#include "sliceprof/metrics.hpp"
#include "sliceprof/optim.hpp"
#include "sliceprof/profile.hpp"
#include "sliceprof/rng.hpp"
#include "sliceprof/tensor.hpp"
#include "sliceprof/volume.hpp"

namespace sliceprof {

struct TrainConfig {
  std::int64_t iterations = 15000;
  std::size_t batch_size = 64;
  std::size_t patch_lr_size = 16;
  std::size_t scale = 0;  ///< 0 = round(s_z / s_x) from the volume header
  double lambda_c = 1.0;
  double lambda_b = 10.0;
  double lambda_w = 0.05;   ///< generator weight decay
  double ema_beta = 0.99;
  double lr = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;   ///< generator gradient clipping (global L2)
  std::size_t profile_taps = 21;
  std::uint64_t seed = 0;
  std::size_t progress_every = 100;
};

struct HistoryRow {
  std::int64_t iteration = 0;
  double l_adv_g = 0.0;
  double l_d = 0.0;
  double l_c = 0.0;
  double l_b = 0.0;
  double fwhm_mm = 0.0;
};

/// Bounded history of training rows; old rows fall off the front.
class HistoryRing {
 public:
  explicit HistoryRing(std::size_t capacity = 16384) : capacity_(capacity) {}

  void push(const HistoryRow& row) {
    if (rows_.size() < capacity_) {
      rows_.push_back(row);
    } else {
      rows_[head_] = row;
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::vector<HistoryRow> rows() const {
    std::vector<HistoryRow> out;
    out.reserve(rows_.size());
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      out.push_back(rows_[(head_ + i) % rows_.size()]);
    }
    return out;
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return rows_.size(); }
  std::size_t head() const { return head_; }

  void restore(std::size_t head, std::vector<HistoryRow> rows) {
    head_ = head;
    rows_ = std::move(rows);
  }
  const std::vector<HistoryRow>& raw() const { return rows_; }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<HistoryRow> rows_;
};

struct TrainState {
  TrainConfig config;
  std::int64_t iteration = 0;
  GeneratorParams gen;
  DiscriminatorParams disc;
  std::vector<AdamState> adam_gen;
  std::vector<AdamState> adam_disc;
  Profile ema;
  Rng rng;
  HistoryRing history;
  double hr_spacing_mm = 1.0;
};

using ProgressSink = std::function<void(const HistoryRow&)>;

/// Resolves scale = round(s_z / s_x), rejecting non-integer ratios.
inline std::size_t derive_scale(const Volume& volume) {
  const double ratio = volume.spacing_mm[2] / volume.spacing_mm[0];
  const double rounded = std::round(ratio);
  if (std::abs(ratio - rounded) > 1e-3 || rounded < 1.0) {
    throw value_error("volume: spacing ratio s_z/s_x = " + std::to_string(ratio) +
                      " is not an integer scale factor");
  }
  return static_cast<std::size_t>(rounded);
}

inline TrainState init_train_state(const Volume& volume, TrainConfig config) {
  check_estimation_spacing(volume);
  if (config.scale == 0) config.scale = derive_scale(volume);
  if (config.batch_size < 1) throw config_error("train: batch_size must be >= 1");
  if (config.patch_lr_size < 1) throw config_error("train: patch_lr_size must be >= 1");

  TrainState state;
  state.config = config;
  state.hr_spacing_mm = volume.spacing_mm[0];
  state.rng = Rng(config.seed);
  GeneratorConfig gen_config;
  gen_config.profile_taps = config.profile_taps;
  state.gen = GeneratorParams::init(gen_config, state.rng);
  state.disc = DiscriminatorParams::init(state.rng);
  for (Tensor* p : state.gen.parameters()) state.adam_gen.push_back(AdamState::for_param(*p));
  for (Tensor* p : state.disc.parameters()) state.adam_disc.push_back(AdamState::for_param(*p));
  state.ema = generator_profile(state.gen, state.hr_spacing_mm);
  return state;
}

namespace detail {

inline void check_finite_losses(std::int64_t iteration, double l_adv_g, double l_d, double l_c,
                                double l_b) {
  if (std::isfinite(l_adv_g) && std::isfinite(l_d) && std::isfinite(l_c) && std::isfinite(l_b)) {
    return;
  }
  throw numeric_error("training aborted at iteration " + std::to_string(iteration) +
                      ": non-finite loss (L_adv=" + std::to_string(l_adv_g) +
                      ", L_D=" + std::to_string(l_d) + ", L_c=" + std::to_string(l_c) +
                      ", L_b=" + std::to_string(l_b) + ")");
}

}  // namespace detail

/// Advances training to `until_iteration`. One iteration is: sample two
/// independent patch batches; one discriminator Adam step on the detached
/// generator output; one generator Adam step on L_adv + lambda_c L_c +
/// lambda_b L_b with weight decay and gradient clipping applied to the
/// generator only; EMA update of the profile.
inline void run_training(const Volume& volume, TrainState& state, std::int64_t until_iteration,
                         const ProgressSink& sink = {}) {
  const TrainConfig& cfg = state.config;
  const std::size_t scale_factor = cfg.scale;
  const std::size_t rows = cfg.patch_lr_size;
  const std::size_t cols = degraded_input_cols(cfg.patch_lr_size, scale_factor, cfg.profile_taps);

  const Volume prepared = normalized_for_training(volume);
  const SampleWeights weights = gradient_weights(prepared, PatchGeometry{rows, cols});

  auto draw_batch = [&](std::vector<Patch>& patches, std::vector<std::size_t>& phases) {
    patches.clear();
    phases.clear();
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const PatchPlane plane = state.rng.uniform01() < 0.5 ? PatchPlane::xz : PatchPlane::yz;
      patches.push_back(sample_patch(prepared, weights, state.rng, plane, rows, cols));
      phases.push_back(scale_factor > 1 ? static_cast<std::size_t>(state.rng.uniform_int(scale_factor)) : 0);
    }
  };

  std::vector<Patch> batch1, batch2;
  std::vector<std::size_t> phases1, phases2;
  while (state.iteration < until_iteration) {
    const std::int64_t t = state.iteration + 1;
    draw_batch(batch1, phases1);
    draw_batch(batch2, phases2);
    const Tensor i1 = patch_batch_tensor(batch1);
    const Tensor i2 = patch_batch_tensor(batch2);

    // Discriminator step: generator outputs detached, persistent u advanced.
    double loss_d_value;
    {
      Tape tape;
      auto w_hats = discriminator_normalized_weights(tape, state.disc, /*update_u=*/true);
      Tensor profile_const;
      {
        Tape scratch;
        profile_const = generator_profile_t(scratch, state.gen).detach();
      }
      Tensor fake1 = degrade_batch(tape, i1, profile_const, scale_factor, phases1);
      Tensor d_real = discriminate_with(tape, w_hats, state.disc.biases,
                                        transpose_last2(tape, fake1), state.disc.leaky_slope);
      Tensor fake2 = degrade_batch(tape, i2, profile_const, scale_factor, phases2);
      Tensor d_fake =
          discriminate_with(tape, w_hats, state.disc.biases, fake2, state.disc.leaky_slope);
      Tensor loss_d = adv_loss_discriminator(tape, d_real, d_fake);
      loss_d_value = loss_d.scalar_value();
      if (!std::isfinite(loss_d_value)) {
        detail::check_finite_losses(t, 0.0, loss_d_value, 0.0, 0.0);
      }
      backward(tape, loss_d);
      auto params = state.disc.parameters();
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor grad(params[p]->shape(), tape.grad_of(*params[p]));
        *params[p] = adam_step(*params[p], grad, state.adam_disc[p], cfg.lr, cfg.adam_beta1,
                               cfg.adam_beta2, cfg.adam_eps, /*weight_decay=*/0.0);
      }
    }

    // Generator step: discriminator weights frozen as constants.
    double l_adv_value, l_c_value, l_b_value;
    {
      Tape tape;
      std::vector<Tensor> frozen_w, frozen_b;
      for (std::size_t l = 0; l < state.disc.weights.size(); ++l) {
        auto res = spectral_normalize(tape, state.disc.weights[l].detach(), state.disc.u[l], 1);
        frozen_w.push_back(res.weight);
        frozen_b.push_back(state.disc.biases[l].detach());
      }
      Tensor profile_t = generator_profile_t(tape, state.gen);
      Tensor fake1 = degrade_batch(tape, i1, profile_t, scale_factor, phases1);
      Tensor d_real = discriminate_with(tape, frozen_w, frozen_b, transpose_last2(tape, fake1),
                                        state.disc.leaky_slope);
      Tensor fake2 = degrade_batch(tape, i2, profile_t, scale_factor, phases2);
      Tensor d_fake = discriminate_with(tape, frozen_w, frozen_b, fake2, state.disc.leaky_slope);
      Tensor l_adv = adv_loss_generator(tape, d_real, d_fake);
      Tensor l_c = centroid_loss(tape, profile_t);
      Tensor l_b = boundary_loss(tape, profile_t);
      Tensor total = add(tape, l_adv,
                         add(tape, scale(tape, l_c, cfg.lambda_c),
                             scale(tape, l_b, cfg.lambda_b)));
      l_adv_value = l_adv.scalar_value();
      l_c_value = l_c.scalar_value();
      l_b_value = l_b.scalar_value();
      detail::check_finite_losses(t, l_adv_value, loss_d_value, l_c_value, l_b_value);
      backward(tape, total);
      auto params = state.gen.parameters();
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (Tensor* p : params) grads.emplace_back(p->shape(), tape.grad_of(*p));
      grads = clip_grad_norm(std::move(grads), cfg.clip_norm);
      for (std::size_t p = 0; p < params.size(); ++p) {
        *params[p] = adam_step(*params[p], grads[p], state.adam_gen[p], cfg.lr, cfg.adam_beta1,
                               cfg.adam_beta2, cfg.adam_eps, cfg.lambda_w);
      }
    }

    const Profile current = generator_profile(state.gen, state.hr_spacing_mm);
    state.ema = ema_update(state.ema, current, cfg.ema_beta);

    HistoryRow row;
    row.iteration = t;
    row.l_adv_g = l_adv_value;
    row.l_d = loss_d_value;
    row.l_c = l_c_value;
    row.l_b = l_b_value;
    try {
      row.fwhm_mm = fwhm(state.ema);
    } catch (const measurement_error&) {
      row.fwhm_mm = std::numeric_limits<double>::quiet_NaN();
    }
    state.history.push(row);
    state.iteration = t;
    if (sink && (t % static_cast<std::int64_t>(cfg.progress_every) == 0 || t == until_iteration)) {
      sink(row);
    }
  }
}

/// Full training run: returns the EMA profile and the loss history.
inline std::pair<Profile, std::vector<HistoryRow>> train(const Volume& volume, TrainConfig config,
                                                         const ProgressSink& sink = {}) {
  TrainState state = init_train_state(volume, config);
  run_training(volume, state, state.config.iterations, sink);
  return {state.ema, state.history.rows()};
}

// ---------------------------------------------------------------------------
// Checkpointing: versioned binary file, little-endian, CRC-protected, with
// the RNG state included so a resumed run reproduces the uninterrupted one.

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int b = 0; b < 8; ++b) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < size; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

class BinaryWriter {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto offset = bytes_.size();
    bytes_.resize(offset + sizeof(T));
    std::memcpy(bytes_.data() + offset, &v, sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void put_doubles(const std::vector<double>& v) {
    put<std::uint64_t>(v.size());
    const auto offset = bytes_.size();
    bytes_.resize(offset + v.size() * sizeof(double));
    std::memcpy(bytes_.data() + offset, v.data(), v.size() * sizeof(double));
  }
  void put_tensor(const Tensor& t) {
    put<std::uint64_t>(t.rank());
    for (std::size_t e : t.shape()) put<std::uint64_t>(e);
    put<std::uint8_t>(t.requires_grad() ? 1 : 0);
    put_doubles(t.values());
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class BinaryReader {
 public:
  BinaryReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    require(sizeof(T));
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    require(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> get_doubles() {
    const auto n = get<std::uint64_t>();
    require(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), data_ + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  Tensor get_tensor() {
    const auto rank = get<std::uint64_t>();
    Shape shape(rank);
    for (auto& e : shape) e = get<std::uint64_t>();
    const bool rg = get<std::uint8_t>() != 0;
    return Tensor(std::move(shape), get_doubles(), rg);
  }
  bool exhausted() const { return pos_ == size_; }

 private:
  void require(std::size_t n) {
    if (pos_ + n > size_) throw data_error("checkpoint: truncated payload");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline void write_adam(BinaryWriter& w, const std::vector<AdamState>& states) {
  w.put<std::uint64_t>(states.size());
  for (const auto& s : states) {
    w.put_doubles(s.m);
    w.put_doubles(s.v);
    w.put<std::int64_t>(s.t);
  }
}

inline std::vector<AdamState> read_adam(BinaryReader& r) {
  std::vector<AdamState> states(r.get<std::uint64_t>());
  for (auto& s : states) {
    s.m = r.get_doubles();
    s.v = r.get_doubles();
    s.t = r.get<std::int64_t>();
  }
  return states;
}

constexpr char kCheckpointMagic[8] = {'S', 'L', 'P', 'R', 'O', 'F', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace detail

inline void checkpoint_save(const TrainState& state, const std::filesystem::path& path) {
  detail::BinaryWriter w;
  const TrainConfig& c = state.config;
  w.put<std::int64_t>(c.iterations);
  w.put<std::uint64_t>(c.batch_size);
  w.put<std::uint64_t>(c.patch_lr_size);
  w.put<std::uint64_t>(c.scale);
  w.put<double>(c.lambda_c);
  w.put<double>(c.lambda_b);
  w.put<double>(c.lambda_w);
  w.put<double>(c.ema_beta);
  w.put<double>(c.lr);
  w.put<double>(c.adam_beta1);
  w.put<double>(c.adam_beta2);
  w.put<double>(c.adam_eps);
  w.put<double>(c.clip_norm);
  w.put<std::uint64_t>(c.profile_taps);
  w.put<std::uint64_t>(c.seed);
  w.put<std::uint64_t>(c.progress_every);

  w.put<std::int64_t>(state.iteration);
  w.put<double>(state.hr_spacing_mm);
  w.put_string(state.rng.save_state());

  const GeneratorConfig& gc = state.gen.config;
  w.put<std::uint64_t>(gc.profile_taps);
  w.put<std::uint64_t>(gc.channels);
  w.put<std::uint64_t>(gc.layers);
  w.put<double>(gc.impulse_bias);
  w.put<double>(gc.final_layer_scale);
  w.put<double>(gc.seed_stddev);
  w.put_tensor(state.gen.seed);
  w.put<std::uint64_t>(state.gen.weights.size());
  for (const auto& t : state.gen.weights) w.put_tensor(t);
  for (const auto& t : state.gen.biases) w.put_tensor(t);

  w.put<double>(state.disc.leaky_slope);
  w.put<std::uint64_t>(state.disc.weights.size());
  for (const auto& t : state.disc.weights) w.put_tensor(t);
  for (const auto& t : state.disc.biases) w.put_tensor(t);
  for (const auto& t : state.disc.u) w.put_tensor(t);

  detail::write_adam(w, state.adam_gen);
  detail::write_adam(w, state.adam_disc);

  w.put_doubles(state.ema.taps);
  w.put<double>(state.ema.spacing_mm);

  w.put<std::uint64_t>(state.history.capacity());
  w.put<std::uint64_t>(state.history.head());
  const auto& rows = state.history.raw();
  w.put<std::uint64_t>(rows.size());
  for (const auto& r : rows) {
    w.put<std::int64_t>(r.iteration);
    w.put<double>(r.l_adv_g);
    w.put<double>(r.l_d);
    w.put<double>(r.l_c);
    w.put<double>(r.l_b);
    w.put<double>(r.fwhm_mm);
  }

  const auto& payload = w.bytes();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  const std::uint32_t version = detail::kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t size = payload.size();
  out.write(reinterpret_cast<const char*>(&size), sizeof(size));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  const std::uint32_t crc = detail::crc32(payload.data(), payload.size());
  out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
  if (!out) throw io_error("short write to " + path.string());
}

inline TrainState checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(detail::kCheckpointMagic) + sizeof(std::uint32_t) +
                         sizeof(std::uint64_t) + sizeof(std::uint32_t)) {
    throw data_error(path.string() + ": checkpoint too small");
  }
  if (std::memcmp(bytes.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0) {
    throw format_error(path.string() + ": not a checkpoint file (bad magic)");
  }
  std::size_t pos = sizeof(detail::kCheckpointMagic);
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + pos, sizeof(version));
  pos += sizeof(version);
  if (version != detail::kCheckpointVersion) {
    throw data_error(path.string() + ": incompatible checkpoint version " +
                     std::to_string(version) + " (expected " +
                     std::to_string(detail::kCheckpointVersion) + ")");
  }
  std::uint64_t size;
  std::memcpy(&size, bytes.data() + pos, sizeof(size));
  pos += sizeof(size);
  if (bytes.size() != pos + size + sizeof(std::uint32_t)) {
    throw data_error(path.string() + ": payload size mismatch");
  }
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + pos + size, sizeof(stored_crc));
  if (detail::crc32(bytes.data() + pos, size) != stored_crc) {
    throw data_error(path.string() + ": checksum mismatch (file is corrupt)");
  }

  detail::BinaryReader r(bytes.data() + pos, size);
  TrainState state;
  TrainConfig& c = state.config;
  c.iterations = r.get<std::int64_t>();
  c.batch_size = r.get<std::uint64_t>();
  c.patch_lr_size = r.get<std::uint64_t>();
  c.scale = r.get<std::uint64_t>();
  c.lambda_c = r.get<double>();
  c.lambda_b = r.get<double>();
  c.lambda_w = r.get<double>();
  c.ema_beta = r.get<double>();
  c.lr = r.get<double>();
  c.adam_beta1 = r.get<double>();
  c.adam_beta2 = r.get<double>();
  c.adam_eps = r.get<double>();
  c.clip_norm = r.get<double>();
  c.profile_taps = r.get<std::uint64_t>();
  c.seed = r.get<std::uint64_t>();
  c.progress_every = r.get<std::uint64_t>();

  state.iteration = r.get<std::int64_t>();
  state.hr_spacing_mm = r.get<double>();
  state.rng.load_state(r.get_string());

  GeneratorConfig gc;
  gc.profile_taps = r.get<std::uint64_t>();
  gc.channels = r.get<std::uint64_t>();
  gc.layers = r.get<std::uint64_t>();
  gc.impulse_bias = r.get<double>();
  gc.final_layer_scale = r.get<double>();
  gc.seed_stddev = r.get<double>();
  state.gen.config = gc;
  state.gen.seed = r.get_tensor();
  const auto n_gen_layers = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_gen_layers; ++i) state.gen.weights.push_back(r.get_tensor());
  for (std::uint64_t i = 0; i < n_gen_layers; ++i) state.gen.biases.push_back(r.get_tensor());

  state.disc.leaky_slope = r.get<double>();
  const auto n_disc_layers = r.get<std::uint64_t>();
  state.disc.weights.clear();
  state.disc.biases.clear();
  state.disc.u.clear();
  for (std::uint64_t i = 0; i < n_disc_layers; ++i) state.disc.weights.push_back(r.get_tensor());
  for (std::uint64_t i = 0; i < n_disc_layers; ++i) state.disc.biases.push_back(r.get_tensor());
  for (std::uint64_t i = 0; i < n_disc_layers; ++i) state.disc.u.push_back(r.get_tensor());

  state.adam_gen = detail::read_adam(r);
  state.adam_disc = detail::read_adam(r);

  state.ema.taps = r.get_doubles();
  state.ema.spacing_mm = r.get<double>();

  const auto capacity = r.get<std::uint64_t>();
  const auto head = r.get<std::uint64_t>();
  const auto n_rows = r.get<std::uint64_t>();
  std::vector<HistoryRow> rows(n_rows);
  for (auto& row : rows) {
    row.iteration = r.get<std::int64_t>();
    row.l_adv_g = r.get<double>();
    row.l_d = r.get<double>();
    row.l_c = r.get<double>();
    row.l_b = r.get<double>();
    row.fwhm_mm = r.get<double>();
  }
  state.history = HistoryRing(capacity);
  state.history.restore(head, std::move(rows));
  if (!r.exhausted()) throw data_error(path.string() + ": trailing bytes in payload");
  return state;
}

/// Writes history rows as CSV (iteration, loss terms, fwhm_mm).
inline void save_history_csv(const std::vector<HistoryRow>& rows,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "iteration,l_adv_g,l_d,l_c,l_b,fwhm_mm\n";
  for (const auto& r : rows) {
    out << r.iteration << ',' << detail::format_double(r.l_adv_g) << ','
        << detail::format_double(r.l_d) << ',' << detail::format_double(r.l_c) << ','
        << detail::format_double(r.l_b) << ',' << detail::format_double(r.fwhm_mm) << '\n';
  }
  if (!out) throw io_error("short write to " + path.string());
}

}  // namespace sliceprof
