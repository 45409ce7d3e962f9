#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "sliceprof/errors.hpp"
#include "sliceprof/profile.hpp"
#include "sliceprof/rng.hpp"
#include "sliceprof/tensor.hpp"
#include "sliceprof/volume.hpp"

namespace sliceprof {

// ---------------------------------------------------------------------------
// Generator: a learnable tensor fed through a linear conv stack; softmax of
// the result (plus a fixed impulse bias) is the estimated profile. The patch
// is not an input of the network; it is convolved with the profile afterward.

struct GeneratorConfig {
  std::size_t profile_taps = 21;  ///< K, odd
  std::size_t channels = 64;
  std::size_t layers = 4;
  double impulse_bias = 6.0;       ///< pre-softmax bias at the center tap
  double final_layer_scale = 0.01; ///< shrinks the conv-stack output at init
  double seed_stddev = 0.1;
};

struct GeneratorParams {
  GeneratorConfig config;
  Tensor seed;                  ///< learnable input, [1, channels, K]
  std::vector<Tensor> weights;  ///< [c_out, c_in, 3] per layer
  std::vector<Tensor> biases;   ///< [c_out] per layer

  static GeneratorParams init(const GeneratorConfig& config, Rng& rng) {
    if (config.profile_taps < 5 || config.profile_taps % 2 == 0) {
      throw config_error("generator: profile taps must be odd and >= 5");
    }
    if (config.layers < 1 || config.channels < 1) {
      throw config_error("generator: need at least one layer and one channel");
    }
    GeneratorParams p;
    p.config = config;
    const std::size_t c = config.channels, k = config.profile_taps;
    {
      std::vector<double> vals(c * k);
      for (double& v : vals) v = rng.normal(0.0, config.seed_stddev);
      p.seed = Tensor({1, c, k}, std::move(vals), true);
    }
    for (std::size_t l = 0; l < config.layers; ++l) {
      const std::size_t c_in = c;
      const std::size_t c_out = (l + 1 == config.layers) ? 1 : c;
      double stddev = std::sqrt(1.0 / static_cast<double>(c_in * 3));
      if (l + 1 == config.layers) stddev *= config.final_layer_scale;
      std::vector<double> vals(c_out * c_in * 3);
      for (double& v : vals) v = rng.normal(0.0, stddev);
      p.weights.emplace_back(Shape{c_out, c_in, 3}, std::move(vals), true);
      p.biases.push_back(Tensor::zeros({c_out}, true));
    }
    return p;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out{&seed};
    for (auto& w : weights) out.push_back(&w);
    for (auto& b : biases) out.push_back(&b);
    return out;
  }
};

/// Profile head as a graph node: softmax(conv_stack(seed) + impulse_bias).
inline Tensor generator_profile_t(Tape& tape, const GeneratorParams& params) {
  const std::size_t k = params.config.profile_taps;
  Tensor x = params.seed;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    x = pad_last(tape, x, 1, 1);
    x = conv1d_valid(tape, x, params.weights[l]);
    x = add_channel_bias(tape, x, params.biases[l]);
  }
  Tensor logits = reshape(tape, x, {k});
  std::vector<double> impulse(k, 0.0);
  impulse[(k - 1) / 2] = params.config.impulse_bias;
  logits = add(tape, logits, Tensor::from_vector(std::move(impulse)));
  return softmax(tape, logits);
}

inline Profile generator_profile(const GeneratorParams& params, double spacing_mm) {
  Tape tape;
  Tensor t = generator_profile_t(tape, params);
  return Profile{t.values(), spacing_mm};
}

// ---------------------------------------------------------------------------
// Degrade: valid row convolution with the profile followed by column
// downsampling, the image-formation model applied to one patch.

/// Expected raw column count for a target width under kernel length k.
inline std::size_t degraded_input_cols(std::size_t target_cols, std::size_t scale, std::size_t k) {
  return target_cols * scale + k - 1;
}

inline Patch degrade(const Patch& patch, const Profile& profile, std::size_t scale,
                     std::size_t phase) {
  const std::size_t k = profile.size();
  if (scale < 1) throw value_error("degrade: scale must be >= 1");
  if (phase >= scale) throw value_error("degrade: phase must be < scale");
  if (patch.cols < k || (patch.cols - k + 1) % scale != 0) {
    const std::size_t target = std::max<std::size_t>(1, (patch.cols + scale - 1) / scale);
    throw shape_error("degrade: patch has " + std::to_string(patch.cols) +
                      " columns; expected target_cols*scale + K - 1 (e.g. " +
                      std::to_string(degraded_input_cols(target, scale, k)) + " for " +
                      std::to_string(target) + " output columns)");
  }
  const std::size_t conv_cols = patch.cols - k + 1;
  const std::size_t out_cols = conv_cols / scale;
  Patch out;
  out.rows = patch.rows;
  out.cols = out_cols;
  out.plane = patch.plane;
  out.values.resize(out.rows * out.cols);
  for (std::size_t r = 0; r < patch.rows; ++r) {
    for (std::size_t i = 0; i < out_cols; ++i) {
      const std::size_t start = phase + i * scale;
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += patch.at(r, start + j) * profile.taps[j];
      out.values[r * out_cols + i] = acc;
    }
  }
  return out;
}

/// Batched, differentiable degrade of [batch, rows, cols] patches with one
/// downsampling phase per patch. Differentiable w.r.t. `profile`.
inline Tensor degrade_batch(Tape& tape, const Tensor& patches, const Tensor& profile,
                            std::size_t scale, const std::vector<std::size_t>& phases) {
  if (patches.rank() != 3) throw shape_error("degrade_batch: patches must be [batch, rows, cols]");
  if (profile.rank() != 1) throw shape_error("degrade_batch: profile must be rank-1");
  const std::size_t b = patches.shape()[0], rows = patches.shape()[1], cols = patches.shape()[2];
  const std::size_t k = profile.shape()[0];
  if (cols < k || (cols - k + 1) % scale != 0) {
    throw shape_error("degrade_batch: " + std::to_string(cols) +
                      " columns do not form target_cols*scale + K - 1 with K=" + std::to_string(k) +
                      " scale=" + std::to_string(scale));
  }
  Tensor rows_as_batch = reshape(tape, patches, {b * rows, 1, cols});
  Tensor kernel = reshape(tape, profile, {1, 1, k});
  Tensor convolved = conv1d_valid(tape, rows_as_batch, kernel);
  convolved = reshape(tape, convolved, {b, rows, cols - k + 1});
  return downsample_batch(tape, convolved, scale, phases);
}

// ---------------------------------------------------------------------------
// Discriminator: five 1D convolutions along columns (widths 3,3,3,1,1 -> a
// receptive field of 7 columns within a single row), spectral normalization
// on every weight, leaky ReLU between hidden layers, sigmoid output.

inline constexpr std::array<std::size_t, 5> kDiscriminatorWidths{3, 3, 3, 1, 1};
inline constexpr std::array<std::size_t, 6> kDiscriminatorChannels{1, 64, 64, 64, 32, 1};
inline constexpr std::size_t kDiscriminatorReceptiveField = 7;

struct DiscriminatorParams {
  double leaky_slope = 0.1;
  std::vector<Tensor> weights;  ///< [c_out, c_in, w] per layer
  std::vector<Tensor> biases;   ///< [c_out] per layer
  std::vector<Tensor> u;        ///< persistent spectral-norm vectors, [c_out]

  static DiscriminatorParams init(Rng& rng) {
    DiscriminatorParams p;
    for (std::size_t l = 0; l < kDiscriminatorWidths.size(); ++l) {
      const std::size_t c_in = kDiscriminatorChannels[l];
      const std::size_t c_out = kDiscriminatorChannels[l + 1];
      const std::size_t w = kDiscriminatorWidths[l];
      const double stddev = std::sqrt(2.0 / static_cast<double>(c_in * w));
      std::vector<double> vals(c_out * c_in * w);
      for (double& v : vals) v = rng.normal(0.0, stddev);
      p.weights.emplace_back(Shape{c_out, c_in, w}, std::move(vals), true);
      p.biases.push_back(Tensor::zeros({c_out}, true));
      std::vector<double> uv(c_out);
      double norm = 0.0;
      for (double& v : uv) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      if (norm > 0) {
        for (double& v : uv) v /= norm;
      } else {
        uv[0] = 1.0;
      }
      p.u.emplace_back(Shape{c_out}, std::move(uv), false);
    }
    return p;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& w : weights) out.push_back(&w);
    for (auto& b : biases) out.push_back(&b);
    return out;
  }
};

/// Spectrally normalized weights for one training step. With `update_u` the
/// persistent power-iteration vectors advance; otherwise they are read-only.
inline std::vector<Tensor> discriminator_normalized_weights(Tape& tape, DiscriminatorParams& params,
                                                            bool update_u, int power_iters = 1) {
  std::vector<Tensor> out;
  out.reserve(params.weights.size());
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    auto res = spectral_normalize(tape, params.weights[l], params.u[l], power_iters);
    if (update_u) params.u[l] = res.u;
    out.push_back(res.weight);
  }
  return out;
}

/// Forward pass with externally supplied (already normalized) weights.
inline Tensor discriminate_with(Tape& tape, const std::vector<Tensor>& weights,
                                const std::vector<Tensor>& biases, const Tensor& x,
                                double leaky_slope) {
  if (x.rank() != 3) throw shape_error("discriminate: input must be [batch, rows, cols]");
  const std::size_t b = x.shape()[0], rows = x.shape()[1], cols = x.shape()[2];
  if (cols < kDiscriminatorReceptiveField) {
    throw shape_error("discriminate: needs >= " + std::to_string(kDiscriminatorReceptiveField) +
                      " columns, got " + std::to_string(cols));
  }
  Tensor h = reshape(tape, x, {b * rows, 1, cols});
  for (std::size_t l = 0; l < weights.size(); ++l) {
    h = conv1d_valid(tape, h, weights[l]);
    h = add_channel_bias(tape, h, biases[l]);
    if (l + 1 < weights.size()) h = leaky_relu(tape, h, leaky_slope);
  }
  h = sigmoid(tape, h);
  return reshape(tape, h, {b, rows, cols - (kDiscriminatorReceptiveField - 1)});
}

/// Per-pixel probability map for one patch. The persistent power-iteration
/// vectors are not advanced, so repeated calls are pure.
struct ProbabilityMap {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

inline ProbabilityMap discriminate(const DiscriminatorParams& params, const Patch& patch) {
  Tape tape;
  DiscriminatorParams scratch = params;
  auto weights = discriminator_normalized_weights(tape, scratch, false);
  Tensor x({1, patch.rows, patch.cols}, patch.values);
  Tensor out = discriminate_with(tape, weights, params.biases, x, params.leaky_slope);
  return ProbabilityMap{out.shape()[1], out.shape()[2], out.values()};
}

// ---------------------------------------------------------------------------
// Losses.

namespace detail {

inline Tensor adv_value(Tape& tape, const Tensor& d_transposed, const Tensor& d_plain,
                        double eps) {
  Tensor p_real = clamp(tape, d_transposed, eps, 1.0 - eps);
  Tensor p_fake = clamp(tape, d_plain, eps, 1.0 - eps);
  Tensor term1 = mean_all(tape, log_t(tape, p_real));
  Tensor one_minus = add_scalar(tape, scale(tape, p_fake, -1.0), 1.0);
  Tensor term2 = mean_all(tape, log_t(tape, one_minus));
  return add(tape, term1, term2);
}

}  // namespace detail

/// Generator objective: mean log D(G(I1)^T) + mean log(1 - D(G(I2))),
/// averaged across all pixels of each map. The generator minimizes this.
inline Tensor adv_loss_generator(Tape& tape, const Tensor& d_on_transposed,
                                 const Tensor& d_on_plain, double eps = 1e-7) {
  return detail::adv_value(tape, d_on_transposed, d_on_plain, eps);
}

/// Discriminator objective: the negation of the value function, minimized by
/// the discriminator. Callers pass maps computed from detached generator
/// outputs so no gradient reaches the generator.
inline Tensor adv_loss_discriminator(Tape& tape, const Tensor& d_on_transposed,
                                     const Tensor& d_on_plain, double eps = 1e-7) {
  return scale(tape, detail::adv_value(tape, d_on_transposed, d_on_plain, eps), -1.0);
}

/// (sum_i i*k_i - floor(K/2))^2: pulls the profile centroid to the center tap.
inline Tensor centroid_loss(Tape& tape, const Tensor& profile) {
  if (profile.rank() != 1) throw shape_error("centroid_loss: profile must be rank-1");
  const std::size_t k = profile.numel();
  std::vector<double> iota(k);
  for (std::size_t i = 0; i < k; ++i) iota[i] = static_cast<double>(i);
  Tensor centroid = dot_const(tape, profile, std::move(iota));
  Tensor shifted = add_scalar(tape, centroid, -std::floor(static_cast<double>(k) / 2.0));
  return square(tape, shifted);
}

/// k_0 + k_1 + k_{K-1} + k_{K-2}: pushes the borders of the profile to zero.
inline Tensor boundary_loss(Tape& tape, const Tensor& profile) {
  if (profile.rank() != 1) throw shape_error("boundary_loss: profile must be rank-1");
  const std::size_t k = profile.numel();
  if (k < 5) throw config_error("boundary_loss: profile must have at least 5 taps");
  std::vector<double> mask(k, 0.0);
  mask[0] = mask[1] = mask[k - 1] = mask[k - 2] = 1.0;
  return dot_const(tape, profile, std::move(mask));
}

/// Exponential moving average of profiles, renormalized to unit sum.
inline Profile ema_update(const Profile& kbar, const Profile& k, double beta) {
  if (kbar.taps.size() != k.taps.size()) {
    throw shape_error("ema_update: profiles have different lengths");
  }
  if (!(beta >= 0.0 && beta < 1.0)) throw value_error("ema_update: beta must be in [0,1)");
  Profile out;
  out.spacing_mm = k.spacing_mm;
  out.taps.resize(k.taps.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < k.taps.size(); ++i) {
    out.taps[i] = beta * kbar.taps[i] + (1.0 - beta) * k.taps[i];
    sum += out.taps[i];
  }
  if (sum > 0.0) {
    for (double& t : out.taps) t /= sum;
  }
  return out;
}

/// Stacks patches into a [batch, rows, cols] constant tensor.
inline Tensor patch_batch_tensor(const std::vector<Patch>& patches) {
  if (patches.empty()) throw value_error("patch_batch_tensor: empty batch");
  const std::size_t rows = patches[0].rows, cols = patches[0].cols;
  std::vector<double> vals;
  vals.reserve(patches.size() * rows * cols);
  for (const Patch& p : patches) {
    if (p.rows != rows || p.cols != cols) {
      throw shape_error("patch_batch_tensor: mixed patch sizes in one batch");
    }
    vals.insert(vals.end(), p.values.begin(), p.values.end());
  }
  return Tensor({patches.size(), rows, cols}, std::move(vals));
}

}  // namespace sliceprof
