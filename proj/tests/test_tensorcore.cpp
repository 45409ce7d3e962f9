#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

#include "oracles.hpp"
#include "sliceprof/optim.hpp"
#include "sliceprof/tensor.hpp"

namespace sp = sliceprof;

namespace {

using BuildFn = std::function<sp::Tensor(sp::Tape&, const std::vector<sp::Tensor>&)>;

std::vector<double> random_values(std::mt19937& rng, std::size_t n, double lo = -1.0,
                                  double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (double& v : out) v = dist(rng);
  return out;
}

// Compares tape gradients of a scalar-valued graph against central finite
// differences for every differentiable input.
void check_gradients(const BuildFn& build, const std::vector<sp::Shape>& shapes,
                     const std::vector<std::vector<double>>& init, double tol = 1e-4) {
  std::vector<sp::Tensor> params;
  params.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) params.emplace_back(shapes[i], init[i], true);

  sp::Tape tape;
  sp::Tensor loss = build(tape, params);
  REQUIRE(loss.numel() == 1);
  sp::backward(tape, loss);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto analytic = tape.grad_of(params[i]);
    auto fd = oracle::finite_diff(
        [&](const std::vector<double>& x) {
          std::vector<sp::Tensor> ps = params;
          ps[i] = sp::Tensor(shapes[i], x, true);
          sp::Tape t;
          return build(t, ps).scalar_value();
        },
        init[i]);
    INFO("input " << i);
    REQUIRE(oracle::max_rel_error(analytic, fd) < tol);
  }
}

}  // namespace

TEST_CASE("conv1d_valid matches the stated examples") {
  sp::Tape tape;
  SECTION("impulse kernel is the identity") {
    auto out = sp::conv1d_valid(tape, sp::Tensor::from_vector({1, 2, 3, 4}),
                                sp::Tensor::from_vector({1}));
    REQUIRE(out.values() == std::vector<double>{1, 2, 3, 4});
  }
  SECTION("box kernel") {
    // Expected values confirmed against the naive loop oracle.
    auto expected = oracle::conv1d({1, 2, 3, 4}, {1, 1});
    REQUIRE(expected == std::vector<double>{3, 5, 7});
    auto out = sp::conv1d_valid(tape, sp::Tensor::from_vector({1, 2, 3, 4}),
                                sp::Tensor::from_vector({1, 1}));
    REQUIRE(out.values() == expected);
  }
  SECTION("impulse input reproduces the kernel") {
    auto out = sp::conv1d_valid(tape, sp::Tensor::from_vector({0, 0, 1, 0, 0}),
                                sp::Tensor::from_vector({0.25, 0.5, 0.25}));
    REQUIRE(out.values() == std::vector<double>{0.25, 0.5, 0.25});
  }
  SECTION("shape mismatch names the offending extents") {
    REQUIRE_THROWS_WITH(sp::conv1d_valid(tape, sp::Tensor::zeros({2}), sp::Tensor::zeros({5})),
                        Catch::Matchers::ContainsSubstring("2") &&
                            Catch::Matchers::ContainsSubstring("5"));
    REQUIRE_THROWS_AS(
        sp::conv1d_valid(tape, sp::Tensor::zeros({1, 2, 8}), sp::Tensor::zeros({4, 3, 3})),
        sp::shape_error);
  }
}

TEST_CASE("conv1d_valid equals the naive oracle on random inputs") {
  std::mt19937 rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    std::uniform_int_distribution<std::size_t> len_d(1, 64);
    std::size_t len = len_d(rng);
    std::uniform_int_distribution<std::size_t> k_d(1, len);
    std::size_t k = k_d(rng);
    std::uniform_int_distribution<std::size_t> ch_d(1, 4);
    std::size_t n = ch_d(rng), c_in = ch_d(rng), c_out = ch_d(rng);

    auto in_vals = random_values(rng, n * c_in * len);
    auto k_vals = random_values(rng, c_out * c_in * k);
    sp::Tape tape;
    auto got = sp::conv1d_valid(tape, sp::Tensor({n, c_in, len}, in_vals),
                                sp::Tensor({c_out, c_in, k}, k_vals));
    auto want = oracle::conv1d_nc(in_vals, n, c_in, len, k_vals, c_out, k);
    for (std::size_t i = 0; i < want.size(); ++i) {
      REQUIRE(std::abs(got.values()[i] - want[i]) <= 1e-12);
    }
  }
}

TEST_CASE("downsample picks strided elements") {
  sp::Tape tape;
  auto x = sp::Tensor::from_vector({1, 2, 3, 4, 5, 6});
  REQUIRE(sp::downsample(tape, x, 2, 0).values() == std::vector<double>{1, 3, 5});
  REQUIRE(sp::downsample(tape, x, 2, 1).values() == std::vector<double>{2, 4, 6});
  REQUIRE(sp::downsample(tape, x, 1, 0).values() == x.values());
  REQUIRE_THROWS_AS(sp::downsample(tape, x, 2, 2), sp::value_error);
}

TEST_CASE("softmax output is a shift-invariant distribution") {
  sp::Tape tape;
  SECTION("uniform logits") {
    auto out = sp::softmax(tape, sp::Tensor::from_vector({0, 0, 0}));
    for (double v : out.values()) REQUIRE(v == Catch::Approx(1.0 / 3.0).margin(1e-15));
  }
  SECTION("saturation") {
    auto out = sp::softmax(tape, sp::Tensor::from_vector({20, 0, 0, 0, 0}));
    REQUIRE(out.values()[0] > 1.0 - 1e-8);
  }
  SECTION("closed form for two logits") {
    auto out = sp::softmax(tape, sp::Tensor::from_vector({1, 2}));
    const double e = std::exp(1.0);
    REQUIRE(out.values()[0] == Catch::Approx(1.0 / (1.0 + e)).epsilon(1e-14));
    REQUIRE(out.values()[1] == Catch::Approx(e / (1.0 + e)).epsilon(1e-14));
  }
  SECTION("properties on random logits") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      auto logits = random_values(rng, 11, -30.0, 30.0);
      auto out = sp::softmax(tape, sp::Tensor::from_vector(logits));
      double sum = 0.0;
      for (double v : out.values()) {
        REQUIRE(v > 0.0);
        sum += v;
      }
      REQUIRE(std::abs(sum - 1.0) <= 1e-12);

      std::vector<double> shifted = logits;
      for (double& v : shifted) v -= 17.25;
      auto out2 = sp::softmax(tape, sp::Tensor::from_vector(shifted));
      for (std::size_t i = 0; i < out.numel(); ++i) {
        REQUIRE(std::abs(out.values()[i] - out2.values()[i]) <= 1e-12);
      }
    }
  }
}

TEST_CASE("leaky_relu applies the negative slope") {
  sp::Tape tape;
  auto out = sp::leaky_relu(tape, sp::Tensor::from_vector({-1, 0, 2}), 0.1);
  REQUIRE(out.values() == std::vector<double>{-0.1, 0, 2});
  auto pos = sp::leaky_relu(tape, sp::Tensor::from_vector({0.5, 3}), 0.1);
  REQUIRE(pos.values() == std::vector<double>{0.5, 3});
  REQUIRE(sp::leaky_relu(tape, sp::Tensor::from_vector({-10}), 0.1).values() ==
          std::vector<double>{-1});
  REQUIRE_THROWS_AS(sp::leaky_relu(tape, pos, 1.5), sp::value_error);
}

TEST_CASE("spectral_normalize estimates the top singular value") {
  SECTION("identity matrix") {
    sp::Tape tape;
    sp::Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    sp::Tensor u({3}, {1, 0, 0});
    auto res = sp::spectral_normalize(tape, eye, u, 5);
    REQUIRE(res.sigma == Catch::Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < 9; ++i) {
      REQUIRE(res.weight.values()[i] == Catch::Approx(eye.values()[i]).margin(1e-12));
    }
  }
  SECTION("diagonal matrix converges to the dominant entry") {
    sp::Tape tape;
    sp::Tensor w({2, 2}, {3, 0, 0, 1});
    sp::Tensor u({2}, {0.6, 0.8});
    auto res = sp::spectral_normalize(tape, w, u, 200);
    REQUIRE(res.sigma == Catch::Approx(3.0).epsilon(1e-9));
    REQUIRE(res.weight.values()[0] == Catch::Approx(1.0).epsilon(1e-9));
    REQUIRE(res.weight.values()[3] == Catch::Approx(1.0 / 3.0).epsilon(1e-6));
  }
  SECTION("scale invariance of the normalized weight") {
    std::mt19937 rng(3);
    auto vals = random_values(rng, 12);
    sp::Tensor u({3}, random_values(rng, 3));
    for (double c : {0.5, 2.0, 17.0}) {
      sp::Tape tape;
      std::vector<double> scaled = vals;
      for (double& v : scaled) v *= c;
      auto base = sp::spectral_normalize(tape, sp::Tensor({3, 4}, vals), u, 60);
      auto res = sp::spectral_normalize(tape, sp::Tensor({3, 4}, scaled), u, 60);
      for (std::size_t i = 0; i < 12; ++i) {
        REQUIRE(res.weight.values()[i] == Catch::Approx(base.weight.values()[i]).margin(1e-9));
      }
    }
  }
  SECTION("sigma matches the Jacobi oracle on random 8x8 matrices") {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      auto vals = random_values(rng, 64);
      sp::Tensor w({8, 8}, vals);
      sp::Tensor u({8}, random_values(rng, 8, 0.1, 1.0));
      sp::Tape tape;
      auto res = sp::spectral_normalize(tape, w, u, 60);
      const double want = oracle::top_singular_value(vals, 8, 8);
      REQUIRE(std::abs(res.sigma - want) <= 1e-6);
    }
  }
  SECTION("zero matrix clamps sigma") {
    sp::Tape tape;
    auto res = sp::spectral_normalize(tape, sp::Tensor::zeros({2, 2}), sp::Tensor({2}, {1, 0}), 1);
    REQUIRE(res.sigma == 1e-12);
    for (double v : res.weight.values()) REQUIRE(v == 0.0);
  }
}

TEST_CASE("adam_step follows the update formula") {
  SECTION("zero gradient and zero decay is a fixed point") {
    sp::Tensor p = sp::Tensor::from_vector({1.5, -2.0}, true);
    sp::AdamState st = sp::AdamState::for_param(p);
    auto p2 = sp::adam_step(p, sp::Tensor::zeros({2}), st, 1e-3, 0.9, 0.999, 1e-8, 0.0);
    REQUIRE(p2.values() == p.values());
    REQUIRE(st.t == 1);
  }
  SECTION("hand-evaluated scalar step") {
    sp::Tensor p = sp::Tensor::from_vector({1.0}, true);
    sp::AdamState st = sp::AdamState::for_param(p);
    auto p2 = sp::adam_step(p, sp::Tensor::from_vector({1.0}), st, 0.1, 0.0, 0.0, 0.0, 0.0);
    REQUIRE(p2.values()[0] == Catch::Approx(0.9).margin(1e-15));
  }
  SECTION("weight decay pulls toward zero") {
    for (double v : {2.5, -0.75}) {
      sp::Tensor p = sp::Tensor::from_vector({v}, true);
      sp::AdamState st = sp::AdamState::for_param(p);
      auto p2 = sp::adam_step(p, sp::Tensor::zeros({1}), st, 0.01, 0.5, 0.999, 1e-8, 0.05);
      REQUIRE(std::abs(p2.values()[0]) < std::abs(v));
      REQUIRE(p2.values()[0] * v > 0.0);
    }
  }
}

TEST_CASE("clip_grad_norm rescales only above the threshold") {
  SECTION("below threshold grads are unchanged") {
    std::vector<sp::Tensor> grads{sp::Tensor::from_vector({0.3, 0.4})};
    auto out = sp::clip_grad_norm(grads, 1.0);
    REQUIRE(out[0].values() == std::vector<double>{0.3, 0.4});
  }
  SECTION("norm-5 gradient scales to the unit ball") {
    std::vector<sp::Tensor> grads{sp::Tensor::from_vector({3, 4})};
    auto out = sp::clip_grad_norm(grads, 1.0);
    REQUIRE(out[0].values()[0] == Catch::Approx(0.6).margin(1e-15));
    REQUIRE(out[0].values()[1] == Catch::Approx(0.8).margin(1e-15));
  }
  SECTION("post-clip global norm never exceeds the bound") {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<sp::Tensor> grads;
      for (int g = 0; g < 3; ++g) {
        grads.push_back(sp::Tensor::from_vector(random_values(rng, 5, -4.0, 4.0)));
      }
      auto out = sp::clip_grad_norm(grads, 1.0);
      double sq = 0.0;
      for (const auto& g : out) {
        for (double v : g.values()) sq += v * v;
      }
      REQUIRE(std::sqrt(sq) <= 1.0 + 1e-9);
    }
  }
}

TEST_CASE("backward covers the basic contracts") {
  SECTION("sum of a leaf gives ones") {
    sp::Tape tape;
    sp::Tensor x = sp::Tensor::from_vector({1, 2, 3}, true);
    sp::backward(tape, sp::sum_all(tape, x));
    REQUIRE(tape.grad_of(x) == std::vector<double>{1, 1, 1});
  }
  SECTION("disconnected parameter gets zeros") {
    sp::Tape tape;
    sp::Tensor x = sp::Tensor::from_vector({1, 2}, true);
    sp::Tensor unused = sp::Tensor::from_vector({5, 5}, true);
    sp::backward(tape, sp::sum_all(tape, x));
    REQUIRE(tape.grad_of(unused) == std::vector<double>{0, 0});
  }
  SECTION("non-scalar loss is rejected") {
    sp::Tape tape;
    sp::Tensor x = sp::Tensor::from_vector({1, 2}, true);
    auto y = sp::add(tape, x, x);
    REQUIRE_THROWS_AS(sp::backward(tape, y), sp::value_error);
  }
  SECTION("sum of conv output matches finite differences tightly") {
    std::mt19937 rng(21);
    auto in_vals = random_values(rng, 9);
    auto k_vals = random_values(rng, 3);
    sp::Tensor x({9}, in_vals, true);
    sp::Tensor k({3}, k_vals, true);
    sp::Tape tape;
    sp::backward(tape, sp::sum_all(tape, sp::conv1d_valid(tape, x, k)));
    auto fd_x = oracle::finite_diff(
        [&](const std::vector<double>& v) {
          sp::Tape t;
          return sp::sum_all(t, sp::conv1d_valid(t, sp::Tensor({9}, v), sp::Tensor({3}, k_vals)))
              .scalar_value();
        },
        in_vals);
    REQUIRE(oracle::max_rel_error(tape.grad_of(x), fd_x) < 1e-6);
  }
}

TEST_CASE("finite differences validate every differentiable op", "[gradcheck]") {
  for (int seed = 0; seed < 100; ++seed) {
    INFO("seed " << seed);
    std::mt19937 rng(2024 + seed);

    // conv1d (both inputs)
    {
      auto coeffs = random_values(rng, 2 * 2 * 5);
      check_gradients(
          [&](sp::Tape& t, const std::vector<sp::Tensor>& p) {
            auto y = sp::conv1d_valid(t, p[0], p[1]);
            return sp::dot_const(t, y, coeffs);
          },
          {{2, 3, 7}, {2, 3, 3}}, {random_values(rng, 42), random_values(rng, 18)});
    }

    // elementwise chain, inputs kept away from the leaky_relu kink
    {
      auto x1 = random_values(rng, 6);
      for (double& v : x1) {
        if (std::abs(v) < 1e-2) v = v < 0 ? v - 0.1 : v + 0.1;
      }
      check_gradients(
          [&](sp::Tape& t, const std::vector<sp::Tensor>& p) {
            auto a = sp::leaky_relu(t, p[0], 0.1);
            auto b = sp::mul(t, a, p[1]);
            auto c = sp::sigmoid(t, sp::add(t, b, p[2]));
            auto d = sp::log_t(t, sp::add_scalar(t, c, 0.5));
            return sp::mean_all(t, sp::square(t, d));
          },
          {{6}, {6}, {6}}, {x1, random_values(rng, 6), random_values(rng, 6)});
    }

    // structural ops: pad, downsample, transpose, reshape, softmax
    {
      auto coeffs = random_values(rng, 24);
      check_gradients(
          [&](sp::Tape& t, const std::vector<sp::Tensor>& p) {
            auto a = sp::pad_last(t, p[0], 1, 2);
            auto b = sp::downsample(t, a, 2, 1);
            auto c = sp::transpose_last2(t, b);
            auto flat = sp::reshape(t, c, {c.numel()});
            auto s = sp::softmax(t, flat);
            return sp::dot_const(t, s, coeffs);
          },
          {{2, 3, 5}}, {random_values(rng, 30)});
    }

    // spectral_normalize at a converged u (power iteration fixed point)
    {
      auto w_vals = random_values(rng, 20);
      auto coeffs = random_values(rng, 20);
      sp::Tensor u0({4}, random_values(rng, 4, 0.1, 1.0));
      sp::Tape warmup;
      auto converged = sp::spectral_normalize(warmup, sp::Tensor({4, 5}, w_vals), u0, 200);
      sp::Tensor u = converged.u;
      check_gradients(
          [&](sp::Tape& t, const std::vector<sp::Tensor>& p) {
            auto res = sp::spectral_normalize(t, p[0], u, 1);
            return sp::dot_const(t, res.weight, coeffs);
          },
          {{4, 5}}, {w_vals}, 2e-4);
    }
  }
}
