#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sliceprof/errors.hpp"

namespace sliceprof {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using ConstMapRowMat = Eigen::Map<const RowMat>;

}  // namespace detail

/// Dense n-dimensional array of 64-bit floats, row-major, immutable after
/// construction. Copies are shallow; the payload is shared.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : data_(std::make_shared<const Payload>(
            Payload{std::move(shape), std::move(values), requires_grad})) {
    for (std::size_t e : data_->shape) {
      if (e == 0) throw shape_error("tensor: extent 0 in shape " + detail::shape_str(data_->shape));
    }
    if (detail::shape_numel(data_->shape) != data_->values.size()) {
      throw shape_error("tensor: shape " + detail::shape_str(data_->shape) + " does not match " +
                        std::to_string(data_->values.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = detail::shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::size_t n = detail::shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor from_vector(std::vector<double> values, bool requires_grad = false) {
    Shape shape{values.size()};
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t numel() const { return data_->values.size(); }
  bool requires_grad() const { return data_->requires_grad; }
  const std::vector<double>& values() const { return data_->values; }

  double scalar_value() const {
    if (numel() != 1) throw value_error("scalar_value: tensor has " + std::to_string(numel()) + " elements");
    return data_->values[0];
  }

  /// Same values, no gradient tracking.
  Tensor detach() const { return Tensor(data_->shape, data_->values, false); }

  /// Identity of the underlying payload; used by Tape bookkeeping.
  const void* id() const { return data_.get(); }

 private:
  struct Payload {
    Shape shape;
    std::vector<double> values;
    bool requires_grad;
  };
  std::shared_ptr<const Payload> data_;
};

enum class OpKind : std::uint8_t {
  kAdd,
  kSub,
  kMul,
  kSquare,
  kScale,
  kAddScalar,
  kAddChannelBias,
  kPadLast,
  kConv1d,
  kDownsampleLast,
  kDownsampleBatch,
  kTransposeLast2,
  kSoftmax1d,
  kLeakyRelu,
  kSigmoid,
  kLog,
  kClamp,
  kSumAll,
  kMeanAll,
  kDotConst,
  kReshape,
  kSpectralNorm,
};

/// Wengert list: ordered record of primitive applications. Inputs of every
/// record precede it; backward() walks the records once, in reverse.
class Tape {
 public:
  struct Record {
    OpKind op;
    std::vector<int> inputs;
    int output;
    std::vector<std::int64_t> iaux;
    std::vector<double> daux;
  };

  /// Node id of a tensor, registering it as a leaf when unseen.
  int node_of(const Tensor& t) {
    auto it = index_.find(t.id());
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(t);
    index_.emplace(t.id(), id);
    return id;
  }

  int find(const Tensor& t) const {
    auto it = index_.find(t.id());
    return it == index_.end() ? -1 : it->second;
  }

  void record(OpKind op, std::vector<int> inputs, const Tensor& output,
              std::vector<std::int64_t> iaux = {}, std::vector<double> daux = {}) {
    int out_id = node_of(output);
    records_.push_back(Record{op, std::move(inputs), out_id, std::move(iaux), std::move(daux)});
  }

  const Tensor& tensor(int node) const { return nodes_[static_cast<std::size_t>(node)]; }
  std::size_t num_records() const { return records_.size(); }

  /// Gradient of the last backward() w.r.t. `t`; zeros when `t` is
  /// disconnected from the loss or unknown to the tape.
  std::vector<double> grad_of(const Tensor& t) const {
    int id = find(t);
    if (id < 0 || static_cast<std::size_t>(id) >= grads_.size() || grads_[id].empty()) {
      return std::vector<double>(t.numel(), 0.0);
    }
    return grads_[id];
  }

  void run_backward(int loss_node);

 private:
  std::vector<double>& grad_buffer(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].numel(), 0.0);
    return g;
  }

  void backward_record(const Record& rec);

  std::vector<Tensor> nodes_;
  std::vector<Record> records_;
  std::unordered_map<const void*, int> index_;
  std::vector<std::vector<double>> grads_;
};

namespace detail {

/// im2col for 1D valid cross-correlation: B[(c*k+j), n*lout+i] = in[n][c][i+j].
inline RowMat im2col_1d(const std::vector<double>& in, std::size_t n_batch, std::size_t c_in,
                        std::size_t len, std::size_t k) {
  const std::size_t lout = len - k + 1;
  RowMat b(static_cast<Eigen::Index>(c_in * k), static_cast<Eigen::Index>(n_batch * lout));
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t j = 0; j < k; ++j) {
      double* row = b.data() + (c * k + j) * n_batch * lout;
      for (std::size_t n = 0; n < n_batch; ++n) {
        std::memcpy(row + n * lout, in.data() + (n * c_in + c) * len + j, lout * sizeof(double));
      }
    }
  }
  return b;
}

struct ConvDims {
  std::size_t n, c_in, len, c_out, k, lout;
  bool rank1;
};

inline ConvDims conv1d_dims(const Tensor& input, const Tensor& kernel) {
  ConvDims d{};
  if (input.rank() == 1 && kernel.rank() == 1) {
    d.rank1 = true;
    d.n = 1;
    d.c_in = 1;
    d.len = input.shape()[0];
    d.c_out = 1;
    d.k = kernel.shape()[0];
  } else if (input.rank() == 3 && kernel.rank() == 3) {
    d.rank1 = false;
    d.n = input.shape()[0];
    d.c_in = input.shape()[1];
    d.len = input.shape()[2];
    d.c_out = kernel.shape()[0];
    d.k = kernel.shape()[2];
    if (kernel.shape()[1] != d.c_in) {
      throw shape_error("conv1d_valid: kernel expects " + std::to_string(kernel.shape()[1]) +
                        " input channels, input has " + std::to_string(d.c_in));
    }
  } else {
    throw shape_error("conv1d_valid: expected rank-1 or rank-3 operands, got input " +
                      shape_str(input.shape()) + " kernel " + shape_str(kernel.shape()));
  }
  if (d.len < d.k) {
    throw shape_error("conv1d_valid: input length " + std::to_string(d.len) +
                      " shorter than kernel length " + std::to_string(d.k));
  }
  d.lout = d.len - d.k + 1;
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops. Each computes the forward value and, when any input takes
// part in differentiation, records itself on the tape.

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("add: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                      detail::shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  Tensor result(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kAdd, {tape.node_of(a), tape.node_of(b)}, result);
  }
  return result;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("sub: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                      detail::shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  Tensor result(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kSub, {tape.node_of(a), tape.node_of(b)}, result);
  }
  return result;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("mul: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                      detail::shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  Tensor result(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kMul, {tape.node_of(a), tape.node_of(b)}, result);
  }
  return result;
}

inline Tensor square(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * x.values()[i];
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kSquare, {tape.node_of(x)}, result);
  return result;
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.values()[i];
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kScale, {tape.node_of(x)}, result, {}, {c});
  return result;
}

inline Tensor add_scalar(Tape& tape, const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] + c;
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kAddScalar, {tape.node_of(x)}, result);
  return result;
}

/// x: [n, c, len], bias: [c]; adds bias[c] to every (n, *, len) element.
inline Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.shape()[0] != x.shape()[1]) {
    throw shape_error("add_channel_bias: input " + detail::shape_str(x.shape()) + " bias " +
                      detail::shape_str(bias.shape()));
  }
  const std::size_t n = x.shape()[0], c = x.shape()[1], len = x.shape()[2];
  std::vector<double> out(x.numel());
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t ic = 0; ic < c; ++ic) {
      const double b = bias.values()[ic];
      const double* src = x.values().data() + (in * c + ic) * len;
      double* dst = out.data() + (in * c + ic) * len;
      for (std::size_t i = 0; i < len; ++i) dst[i] = src[i] + b;
    }
  }
  Tensor result(x.shape(), std::move(out), x.requires_grad() || bias.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kAddChannelBias, {tape.node_of(x), tape.node_of(bias)}, result);
  }
  return result;
}

/// Zero-pads the last axis by `left` and `right` elements.
inline Tensor pad_last(Tape& tape, const Tensor& x, std::size_t left, std::size_t right) {
  if (x.rank() == 0) throw shape_error("pad_last: rank-0 tensor");
  Shape shape = x.shape();
  const std::size_t len = shape.back();
  shape.back() = len + left + right;
  const std::size_t lead = x.numel() / len;
  std::vector<double> out(lead * shape.back(), 0.0);
  for (std::size_t l = 0; l < lead; ++l) {
    std::memcpy(out.data() + l * shape.back() + left, x.values().data() + l * len,
                len * sizeof(double));
  }
  Tensor result(std::move(shape), std::move(out), x.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kPadLast, {tape.node_of(x)}, result,
                {static_cast<std::int64_t>(left), static_cast<std::int64_t>(right)});
  }
  return result;
}

/// Valid 1D cross-correlation.
///
/// input [n, c_in, len] with kernel [c_out, c_in, k] gives
/// [n, c_out, len - k + 1]; rank-1 operands are treated as
/// [1, 1, len] and [1, 1, k] and give a rank-1 result.
inline Tensor conv1d_valid(Tape& tape, const Tensor& input, const Tensor& kernel) {
  const auto d = detail::conv1d_dims(input, kernel);
  detail::RowMat b = detail::im2col_1d(input.values(), d.n, d.c_in, d.len, d.k);
  detail::ConstMapRowMat a(kernel.values().data(), static_cast<Eigen::Index>(d.c_out),
                           static_cast<Eigen::Index>(d.c_in * d.k));
  detail::RowMat c(static_cast<Eigen::Index>(d.c_out), static_cast<Eigen::Index>(d.n * d.lout));
  c.noalias() = a * b;

  std::vector<double> out(d.n * d.c_out * d.lout);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.c_out; ++o) {
      std::memcpy(out.data() + (n * d.c_out + o) * d.lout, c.data() + o * d.n * d.lout + n * d.lout,
                  d.lout * sizeof(double));
    }
  }
  Shape shape = d.rank1 ? Shape{d.lout} : Shape{d.n, d.c_out, d.lout};
  Tensor result(std::move(shape), std::move(out), input.requires_grad() || kernel.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kConv1d, {tape.node_of(input), tape.node_of(kernel)}, result,
                {static_cast<std::int64_t>(d.n), static_cast<std::int64_t>(d.c_in),
                 static_cast<std::int64_t>(d.len), static_cast<std::int64_t>(d.c_out),
                 static_cast<std::int64_t>(d.k)});
  }
  return result;
}

/// Keeps every `step`-th element of the last axis starting at `phase`.
inline Tensor downsample(Tape& tape, const Tensor& x, std::size_t step, std::size_t phase) {
  if (step < 1) throw value_error("downsample: step must be >= 1");
  if (phase >= step) {
    throw value_error("downsample: phase " + std::to_string(phase) + " must be < step " +
                      std::to_string(step));
  }
  Shape shape = x.shape();
  const std::size_t len = shape.back();
  if (phase >= len) throw shape_error("downsample: phase exceeds axis length");
  const std::size_t lout = (len - phase + step - 1) / step;
  shape.back() = lout;
  const std::size_t lead = x.numel() / len;
  std::vector<double> out(lead * lout);
  for (std::size_t l = 0; l < lead; ++l) {
    const double* src = x.values().data() + l * len;
    double* dst = out.data() + l * lout;
    for (std::size_t i = 0; i < lout; ++i) dst[i] = src[phase + i * step];
  }
  Tensor result(std::move(shape), std::move(out), x.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kDownsampleLast, {tape.node_of(x)}, result,
                {static_cast<std::int64_t>(step), static_cast<std::int64_t>(phase)});
  }
  return result;
}

/// downsample() along the last axis of [batch, rows, cols] with one phase per
/// batch entry. Requires cols % step == 0 so all entries share the out width.
inline Tensor downsample_batch(Tape& tape, const Tensor& x, std::size_t step,
                               const std::vector<std::size_t>& phases) {
  if (x.rank() != 3) throw shape_error("downsample_batch: expected rank-3, got " + detail::shape_str(x.shape()));
  const std::size_t n = x.shape()[0], rows = x.shape()[1], cols = x.shape()[2];
  if (phases.size() != n) throw shape_error("downsample_batch: need one phase per batch entry");
  if (step < 1) throw value_error("downsample_batch: step must be >= 1");
  if (cols % step != 0) {
    throw shape_error("downsample_batch: cols " + std::to_string(cols) + " not divisible by step " +
                      std::to_string(step));
  }
  const std::size_t lout = cols / step;
  std::vector<double> out(n * rows * lout);
  std::vector<std::int64_t> iaux{static_cast<std::int64_t>(step)};
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t phase = phases[b];
    if (phase >= step) throw value_error("downsample_batch: phase must be < step");
    iaux.push_back(static_cast<std::int64_t>(phase));
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = x.values().data() + (b * rows + r) * cols;
      double* dst = out.data() + (b * rows + r) * lout;
      for (std::size_t i = 0; i < lout; ++i) dst[i] = src[phase + i * step];
    }
  }
  Tensor result(Shape{n, rows, lout}, std::move(out), x.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kDownsampleBatch, {tape.node_of(x)}, result, std::move(iaux));
  }
  return result;
}

/// Swaps the last two axes.
inline Tensor transpose_last2(Tape& tape, const Tensor& x) {
  if (x.rank() < 2) throw shape_error("transpose_last2: rank must be >= 2");
  Shape shape = x.shape();
  const std::size_t rows = shape[shape.size() - 2], cols = shape[shape.size() - 1];
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  const std::size_t lead = x.numel() / (rows * cols);
  std::vector<double> out(x.numel());
  for (std::size_t l = 0; l < lead; ++l) {
    const double* src = x.values().data() + l * rows * cols;
    double* dst = out.data() + l * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
  Tensor result(std::move(shape), std::move(out), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kTransposeLast2, {tape.node_of(x)}, result);
  return result;
}

/// Numerically stable softmax over a rank-1 tensor.
inline Tensor softmax(Tape& tape, const Tensor& logits) {
  if (logits.rank() != 1) throw shape_error("softmax: expected rank-1, got " + detail::shape_str(logits.shape()));
  const double m = *std::max_element(logits.values().begin(), logits.values().end());
  std::vector<double> out(logits.numel());
  double sum = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(logits.values()[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  Tensor result(logits.shape(), std::move(out), logits.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kSoftmax1d, {tape.node_of(logits)}, result);
  return result;
}

inline Tensor leaky_relu(Tape& tape, const Tensor& x, double slope) {
  if (!(slope > 0.0 && slope < 1.0)) throw value_error("leaky_relu: slope must be in (0,1)");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = v >= 0.0 ? v : slope * v;
  }
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kLeakyRelu, {tape.node_of(x)}, result, {}, {slope});
  return result;
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kSigmoid, {tape.node_of(x)}, result);
  return result;
}

inline Tensor log_t(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x.values()[i]);
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kLog, {tape.node_of(x)}, result);
  return result;
}

inline Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw value_error("clamp: lo must be <= hi");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, x.values()[i]));
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kClamp, {tape.node_of(x)}, result, {}, {lo, hi});
  return result;
}

inline Tensor sum_all(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor result(Shape{1}, {s}, x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kSumAll, {tape.node_of(x)}, result);
  return result;
}

inline Tensor mean_all(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor result(Shape{1}, {s / static_cast<double>(x.numel())}, x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kMeanAll, {tape.node_of(x)}, result);
  return result;
}

/// Scalar dot product with a fixed coefficient vector.
inline Tensor dot_const(Tape& tape, const Tensor& x, std::vector<double> coeffs) {
  if (x.numel() != coeffs.size()) {
    throw shape_error("dot_const: tensor has " + std::to_string(x.numel()) + " elements, coeffs " +
                      std::to_string(coeffs.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < coeffs.size(); ++i) s += x.values()[i] * coeffs[i];
  Tensor result(Shape{1}, {s}, x.requires_grad());
  if (result.requires_grad()) {
    tape.record(OpKind::kDotConst, {tape.node_of(x)}, result, {}, std::move(coeffs));
  }
  return result;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (detail::shape_numel(shape) != x.numel()) {
    throw shape_error("reshape: cannot view " + detail::shape_str(x.shape()) + " as " +
                      detail::shape_str(shape));
  }
  Tensor result(std::move(shape), x.values(), x.requires_grad());
  if (result.requires_grad()) tape.record(OpKind::kReshape, {tape.node_of(x)}, result);
  return result;
}

struct SpectralNormResult {
  Tensor weight;  ///< input weight divided by its estimated top singular value
  Tensor u;       ///< updated left singular vector estimate
  double sigma;   ///< estimated top singular value
};

/// Spectral normalization via power iteration.
///
/// `weight` is treated as a matrix [out, in*k] (rank-2, or rank-3 with the
/// trailing axes flattened); `u` is the persistent left-vector estimate.
/// Gradients flow through the division by sigma; u and v are constants of the
/// step.
inline SpectralNormResult spectral_normalize(Tape& tape, const Tensor& weight, const Tensor& u,
                                             int power_iters) {
  if (power_iters < 1) throw value_error("spectral_normalize: power_iters must be >= 1");
  if (weight.rank() != 2 && weight.rank() != 3) {
    throw shape_error("spectral_normalize: weight must be rank-2 or rank-3");
  }
  const std::size_t rows = weight.shape()[0];
  const std::size_t cols = weight.numel() / rows;
  if (u.rank() != 1 || u.shape()[0] != rows) {
    throw shape_error("spectral_normalize: u must be rank-1 of length " + std::to_string(rows));
  }
  const auto& w = weight.values();
  std::vector<double> uv = u.values();
  std::vector<double> vv(cols, 0.0);

  auto normalize = [](std::vector<double>& x) {
    double n = 0.0;
    for (double v : x) n += v * v;
    n = std::sqrt(n);
    if (n > 1e-24) {
      for (double& v : x) v /= n;
    }
    return n;
  };
  {
    double un = 0.0;
    for (double v : uv) un += v * v;
    if (!(un > 0.0)) throw value_error("spectral_normalize: u must be nonzero");
  }

  for (int it = 0; it < power_iters; ++it) {
    // v <- W^T u / ||.||
    std::fill(vv.begin(), vv.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double ur = uv[r];
      const double* wr = w.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) vv[c] += wr[c] * ur;
    }
    normalize(vv);
    // u <- W v / ||.||
    for (std::size_t r = 0; r < rows; ++r) {
      const double* wr = w.data() + r * cols;
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * vv[c];
      uv[r] = acc;
    }
    normalize(uv);
  }
  double sigma = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * vv[c];
    sigma += uv[r] * acc;
  }
  const double safe_sigma = std::max(sigma, 1e-12);

  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i] / safe_sigma;
  Tensor normalized(weight.shape(), std::move(out), weight.requires_grad());
  if (normalized.requires_grad()) {
    std::vector<double> daux;
    daux.reserve(1 + rows + cols);
    daux.push_back(safe_sigma);
    daux.insert(daux.end(), uv.begin(), uv.end());
    daux.insert(daux.end(), vv.begin(), vv.end());
    tape.record(OpKind::kSpectralNorm, {tape.node_of(weight)}, normalized,
                {static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)},
                std::move(daux));
  }
  return SpectralNormResult{normalized, Tensor(u.shape(), std::move(uv)), safe_sigma};
}

/// Reverse-mode differentiation of a scalar loss recorded on `tape`.
inline void backward(Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1) {
    throw value_error("backward: loss must be scalar, got " + detail::shape_str(loss.shape()));
  }
  const int id = tape.find(loss);
  if (id < 0) throw value_error("backward: loss is not on the tape");
  tape.run_backward(id);
}

inline void Tape::run_backward(int loss_node) {
  grads_.assign(nodes_.size(), {});
  grad_buffer(loss_node)[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (grads_[static_cast<std::size_t>(it->output)].empty()) continue;
    backward_record(*it);
  }
}

inline void Tape::backward_record(const Record& rec) {
  const std::vector<double>& gout = grads_[static_cast<std::size_t>(rec.output)];
  auto wants = [&](int slot) { return nodes_[static_cast<std::size_t>(rec.inputs[slot])].requires_grad(); };
  auto in_vals = [&](int slot) -> const std::vector<double>& {
    return nodes_[static_cast<std::size_t>(rec.inputs[slot])].values();
  };
  auto out_vals = [&]() -> const std::vector<double>& {
    return nodes_[static_cast<std::size_t>(rec.output)].values();
  };

  switch (rec.op) {
    case OpKind::kAdd: {
      for (int s = 0; s < 2; ++s) {
        if (!wants(s)) continue;
        auto& g = grad_buffer(rec.inputs[s]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
      }
      break;
    }
    case OpKind::kSub: {
      if (wants(0)) {
        auto& g = grad_buffer(rec.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
      }
      if (wants(1)) {
        auto& g = grad_buffer(rec.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gout[i];
      }
      break;
    }
    case OpKind::kMul: {
      if (wants(0)) {
        auto& g = grad_buffer(rec.inputs[0]);
        const auto& b = in_vals(1);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * b[i];
      }
      if (wants(1)) {
        auto& g = grad_buffer(rec.inputs[1]);
        const auto& a = in_vals(0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * a[i];
      }
      break;
    }
    case OpKind::kSquare: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const auto& x = in_vals(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * x[i] * gout[i];
      break;
    }
    case OpKind::kScale: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const double c = rec.daux[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * gout[i];
      break;
    }
    case OpKind::kAddScalar:
    case OpKind::kReshape: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
      break;
    }
    case OpKind::kAddChannelBias: {
      const auto& xshape = nodes_[static_cast<std::size_t>(rec.inputs[0])].shape();
      const std::size_t n = xshape[0], c = xshape[1], len = xshape[2];
      if (wants(0)) {
        auto& g = grad_buffer(rec.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
      }
      if (wants(1)) {
        auto& g = grad_buffer(rec.inputs[1]);
        for (std::size_t in = 0; in < n; ++in) {
          for (std::size_t ic = 0; ic < c; ++ic) {
            const double* src = gout.data() + (in * c + ic) * len;
            double acc = 0.0;
            for (std::size_t i = 0; i < len; ++i) acc += src[i];
            g[ic] += acc;
          }
        }
      }
      break;
    }
    case OpKind::kPadLast: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const std::size_t left = static_cast<std::size_t>(rec.iaux[0]);
      const auto& xshape = nodes_[static_cast<std::size_t>(rec.inputs[0])].shape();
      const std::size_t len = xshape.back();
      const std::size_t lead = g.size() / len;
      const std::size_t padded = nodes_[static_cast<std::size_t>(rec.output)].shape().back();
      for (std::size_t l = 0; l < lead; ++l) {
        const double* src = gout.data() + l * padded + left;
        double* dst = g.data() + l * len;
        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
      }
      break;
    }
    case OpKind::kConv1d: {
      const std::size_t n = static_cast<std::size_t>(rec.iaux[0]);
      const std::size_t c_in = static_cast<std::size_t>(rec.iaux[1]);
      const std::size_t len = static_cast<std::size_t>(rec.iaux[2]);
      const std::size_t c_out = static_cast<std::size_t>(rec.iaux[3]);
      const std::size_t k = static_cast<std::size_t>(rec.iaux[4]);
      const std::size_t lout = len - k + 1;
      // dC[o, n*lout+i] = gout[n][o][i]
      detail::RowMat dc(static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(n * lout));
      for (std::size_t in = 0; in < n; ++in) {
        for (std::size_t o = 0; o < c_out; ++o) {
          std::memcpy(dc.data() + o * n * lout + in * lout, gout.data() + (in * c_out + o) * lout,
                      lout * sizeof(double));
        }
      }
      if (wants(1)) {
        detail::RowMat b = detail::im2col_1d(in_vals(0), n, c_in, len, k);
        auto& g = grad_buffer(rec.inputs[1]);
        detail::MapRowMat ga(g.data(), static_cast<Eigen::Index>(c_out),
                             static_cast<Eigen::Index>(c_in * k));
        ga.noalias() += dc * b.transpose();
      }
      if (wants(0)) {
        detail::ConstMapRowMat a(in_vals(1).data(), static_cast<Eigen::Index>(c_out),
                                 static_cast<Eigen::Index>(c_in * k));
        detail::RowMat db(static_cast<Eigen::Index>(c_in * k), static_cast<Eigen::Index>(n * lout));
        db.noalias() = a.transpose() * dc;
        auto& g = grad_buffer(rec.inputs[0]);
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t j = 0; j < k; ++j) {
            const double* src = db.data() + (c * k + j) * n * lout;
            for (std::size_t in = 0; in < n; ++in) {
              double* dst = g.data() + (in * c_in + c) * len + j;
              const double* row = src + in * lout;
              for (std::size_t i = 0; i < lout; ++i) dst[i] += row[i];
            }
          }
        }
      }
      break;
    }
    case OpKind::kDownsampleLast: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const std::size_t step = static_cast<std::size_t>(rec.iaux[0]);
      const std::size_t phase = static_cast<std::size_t>(rec.iaux[1]);
      const std::size_t len = nodes_[static_cast<std::size_t>(rec.inputs[0])].shape().back();
      const std::size_t lout = nodes_[static_cast<std::size_t>(rec.output)].shape().back();
      const std::size_t lead = g.size() / len;
      for (std::size_t l = 0; l < lead; ++l) {
        const double* src = gout.data() + l * lout;
        double* dst = g.data() + l * len;
        for (std::size_t i = 0; i < lout; ++i) dst[phase + i * step] += src[i];
      }
      break;
    }
    case OpKind::kDownsampleBatch: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const std::size_t step = static_cast<std::size_t>(rec.iaux[0]);
      const auto& xshape = nodes_[static_cast<std::size_t>(rec.inputs[0])].shape();
      const std::size_t n = xshape[0], rows = xshape[1], cols = xshape[2];
      const std::size_t lout = cols / step;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t phase = static_cast<std::size_t>(rec.iaux[1 + b]);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* src = gout.data() + (b * rows + r) * lout;
          double* dst = g.data() + (b * rows + r) * cols;
          for (std::size_t i = 0; i < lout; ++i) dst[phase + i * step] += src[i];
        }
      }
      break;
    }
    case OpKind::kTransposeLast2: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const auto& xshape = nodes_[static_cast<std::size_t>(rec.inputs[0])].shape();
      const std::size_t rows = xshape[xshape.size() - 2], cols = xshape[xshape.size() - 1];
      const std::size_t lead = g.size() / (rows * cols);
      for (std::size_t l = 0; l < lead; ++l) {
        const double* src = gout.data() + l * rows * cols;  // [cols, rows]
        double* dst = g.data() + l * rows * cols;           // [rows, cols]
        for (std::size_t c = 0; c < cols; ++c) {
          for (std::size_t r = 0; r < rows; ++r) dst[r * cols + c] += src[c * rows + r];
        }
      }
      break;
    }
    case OpKind::kSoftmax1d: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const auto& y = out_vals();
      double dot = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) dot += gout[i] * y[i];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += y[i] * (gout[i] - dot);
      break;
    }
    case OpKind::kLeakyRelu: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const auto& x = in_vals(0);
      const double slope = rec.daux[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (x[i] >= 0.0 ? 1.0 : slope) * gout[i];
      break;
    }
    case OpKind::kSigmoid: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const auto& y = out_vals();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += y[i] * (1.0 - y[i]) * gout[i];
      break;
    }
    case OpKind::kLog: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const auto& x = in_vals(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] / x[i];
      break;
    }
    case OpKind::kClamp: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const auto& x = in_vals(0);
      const double lo = rec.daux[0], hi = rec.daux[1];
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > lo && x[i] < hi) g[i] += gout[i];
      }
      break;
    }
    case OpKind::kSumAll: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[0];
      break;
    }
    case OpKind::kMeanAll: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const double inv = 1.0 / static_cast<double>(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[0] * inv;
      break;
    }
    case OpKind::kDotConst: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[0] * rec.daux[i];
      break;
    }
    case OpKind::kSpectralNorm: {
      if (!wants(0)) break;
      auto& g = grad_buffer(rec.inputs[0]);
      const std::size_t rows = static_cast<std::size_t>(rec.iaux[0]);
      const std::size_t cols = static_cast<std::size_t>(rec.iaux[1]);
      const double sigma = rec.daux[0];
      const double* u = rec.daux.data() + 1;
      const double* v = rec.daux.data() + 1 + rows;
      const auto& w = in_vals(0);
      double gw_dot = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) gw_dot += gout[i] * w[i];
      const double coeff = gw_dot / (sigma * sigma);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          g[r * cols + c] += gout[r * cols + c] / sigma - coeff * u[r] * v[c];
        }
      }
      break;
    }
  }
}

}  // namespace sliceprof
