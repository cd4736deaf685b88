#include <array>
#include <random>

#include "can/fd_check.hpp"
#include "can/mtcm.hpp"
#include "can/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace can;

namespace {

// Fault hook is process-global; make sure a failing check cannot leak it.
struct FaultGuard {
  explicit FaultGuard(std::string_view op) { set_adjoint_fault(op); }
  ~FaultGuard() { set_adjoint_fault(""); }
};

real input_only(const DifferentiableBlock& f, const VideoTensor& x, std::uint64_t seed) {
  FdOptions opt;
  opt.seed = seed;
  return fd_check(f, x, std::span<Param* const>{}, opt).max_rel_error;
}

constexpr std::array<std::uint64_t, 3> kSeeds{11, 12, 13};

}  // namespace

TEST_CASE("backward of the identity gives all-ones") {
  Tape tape;
  const Var x = tape.leaf(VideoTensor(Dims{1, 2, 3, 3, 2}, real(0.3)));
  const Var y = tape.scale(x, real(1));
  tape.backward(y, VideoTensor(tape.value(y).dims(), real(1)));
  const VideoTensor g = tape.grad(x);
  for (real v : g.values()) CHECK(v == 1.0);
}

TEST_CASE("sum(sigmoid(x)) at x = 0 has gradient 1/4") {
  Tape tape;
  const Var x = tape.leaf(VideoTensor(Dims{2, 3, 2, 2, 3}));
  const Var y = tape.sigmoid(x);
  tape.backward(y, VideoTensor(tape.value(y).dims(), real(1)));
  const VideoTensor g = tape.grad(x);
  for (real v : g.values()) CHECK(v == 0.25);
}

TEST_CASE("tape state errors") {
  Tape tape;
  const Var x = tape.leaf(VideoTensor(Dims{1, 2, 2, 2, 2}, real(1)));
  const Var y = tape.sigmoid(x);
  CHECK_THROWS_AS(tape.backward(y, VideoTensor(Dims{1, 2, 2, 2, 3})), ShapeError);
  tape.backward(y, VideoTensor(tape.value(y).dims(), real(1)));
  CHECK_THROWS_AS(tape.backward(y, VideoTensor(tape.value(y).dims(), real(1))), StateError);
  const VideoTensor first = tape.grad(x);
  tape.zero_grad();
  tape.backward(y, VideoTensor(tape.value(y).dims(), real(1)));
  CHECK(tape.grad(x) == first);
}

TEST_CASE("fd_check rejects bad epsilon and non-finite losses") {
  const VideoTensor x(Dims{1, 1, 1, 1, 2}, real(1));
  FdOptions opt;
  opt.epsilon = real(1e-2);
  auto ident = [](Tape& t, Var v) { return t.scale(v, real(1)); };
  CHECK_THROWS_AS(fd_check(ident, x, {}, opt), std::invalid_argument);
  auto blowup = [](Tape& t, Var v) { return t.scale(v, real(1e308)); };
  CHECK_THROWS_AS(fd_check(blowup, VideoTensor(Dims{1, 1, 1, 1, 2}, real(10)), {}), NumericError);
}

TEST_CASE("fd_check: linear map is exact up to rounding") {
  Rng rng(3);
  Param w("w", {5, 7}), b("b", {5});
  init_normal(w, real(1), rng);
  init_normal(b, real(1), rng);
  const VideoTensor x = oracle::random_tensor(Dims{3, 1, 1, 1, 7}, rng);
  std::array<Param*, 2> ps{&w, &b};
  const FdReport r = fd_check([&](Tape& t, Var v) { return t.linear(v, w, b); }, x, ps);
  CHECK(r.bundles.size() == 3);
  CHECK(r.max_rel_error <= 1e-10);
}

TEST_CASE("fd_check: dilation-3 temporal conv") {
  Rng rng(5);
  const ConvGeometry g = ConvGeometry::same(4, 4, {3, 1, 1}, {3, 1, 1}, 4);
  ConvLayer l = ConvLayer::create("dw", g, true, rng);
  const VideoTensor x = oracle::random_tensor(Dims{1, 8, 3, 3, 4}, rng);
  std::array<Param*, 2> ps{&l.weight, &l.bias};
  const FdReport r = fd_check([&](Tape& t, Var v) { return t.conv3d(v, l); }, x, ps);
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("fd_check: softmax-weighted branch sum w.r.t. the logits") {
  Rng rng(7);
  Param alpha("alpha", {3});
  init_normal(alpha, real(1), rng);
  const VideoTensor b1 = oracle::random_tensor(Dims{1, 4, 2, 2, 3}, rng);
  const VideoTensor b2 = oracle::random_tensor(Dims{1, 4, 2, 2, 3}, rng);
  const VideoTensor x = oracle::random_tensor(Dims{1, 4, 2, 2, 3}, rng);
  auto f = [&](Tape& t, Var v) {
    const std::array<Var, 3> xs{v, t.leaf(b1, false), t.leaf(b2, false)};
    return t.softmax_weighted_sum(xs, alpha);
  };
  std::array<Param*, 1> ps{&alpha};
  CHECK(fd_check(f, x, ps).max_rel_error <= 1e-6);
}

TEST_CASE("fd_check <= 1e-4 on three seeds: conv3d variants") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    const std::array<ConvGeometry, 5> geoms{
        ConvGeometry::same(8, 6, {3, 3, 3}),
        ConvGeometry::same(8, 8, {3, 1, 1}, {2, 1, 1}, 8),
        ConvGeometry::same(8, 4, {1, 3, 3}, {1, 1, 1}, 2),
        ConvGeometry::same(8, 4, {1, 1, 1}),
        [] {
          ConvGeometry g = ConvGeometry::same(8, 4, {1, 3, 3});
          g.stride = {1, 2, 2};
          return g;
        }(),
    };
    for (const ConvGeometry& g : geoms) {
      ConvLayer l = ConvLayer::create("conv", g, true, rng);
      std::array<Param*, 2> ps{&l.weight, &l.bias};
      FdOptions opt;
      opt.seed = seed;
      CHECK(fd_check([&](Tape& t, Var v) { return t.conv3d(v, l); }, x, ps, opt).max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: temporal_diff") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    CHECK(input_only([](Tape& t, Var v) { return t.temporal_diff(v); }, x, seed) <= 1e-4);
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: channel_pool") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    CHECK(input_only([](Tape& t, Var v) { return t.channel_pool(v); }, x, seed) <= 1e-4);
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: spatial_pool") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    CHECK(input_only([](Tape& t, Var v) { return t.spatial_pool(v); }, x, seed) <= 1e-4);
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: global_avg_pool") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    CHECK(input_only([](Tape& t, Var v) { return t.global_avg_pool(v); }, x, seed) <= 1e-4);
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: max_pool_spatial") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    CHECK(input_only([](Tape& t, Var v) { return t.max_pool_spatial(v, 3, 2, 1); }, x, seed) <= 1e-4);
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: sigmoid and relu") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    CHECK(input_only([](Tape& t, Var v) { return t.sigmoid(v); }, x, seed) <= 1e-4);
    CHECK(input_only([](Tape& t, Var v) { return t.relu(v); }, x, seed) <= 1e-4);
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: softmax") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    Param alpha("alpha", {3});
    init_normal(alpha, real(1), rng);
    const VideoTensor other = oracle::random_tensor(x.dims(), rng);
    auto f = [&](Tape& t, Var v) {
      const Var o = t.leaf(other, false);
      const std::array<Var, 3> xs{v, o, t.sigmoid(v)};
      return t.softmax_weighted_sum(xs, alpha);
    };
    std::array<Param*, 1> ps{&alpha};
    FdOptions opt;
    opt.seed = seed;
    CHECK(fd_check(f, x, ps, opt).max_rel_error <= 1e-4);
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: broadcast hadamard and add") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    const VideoTensor over_space = oracle::random_tensor(Dims{2, 5, 1, 1, 8}, rng);
    const VideoTensor over_channels = oracle::random_tensor(Dims{2, 5, 4, 4, 1}, rng);
    auto f = [&](Tape& t, Var v) {
      const Var a = t.hadamard(v, t.leaf(over_space, false));
      return t.add(t.hadamard(a, t.leaf(over_channels, false)), v);
    };
    CHECK(input_only(f, x, seed) <= 1e-4);
    // gradients flowing into the broadcast operand
    auto g = [&](Tape& t, Var v) {
      const Var s = t.spatial_pool(v);
      const Var c = t.slice(t.channel_pool(v), 0, 1);
      return t.add(t.hadamard(t.hadamard(t.leaf(x, false), s), c), t.scale(s, real(0.5)));
    };
    CHECK(input_only(g, x, seed) <= 1e-4);
  }
}

TEST_CASE("fd_check <= 1e-4 on three seeds: channel affine and linear head") {
  for (std::uint64_t seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    const VideoTensor x = oracle::random_tensor(Dims{2, 5, 4, 4, 8}, rng);
    Param gain("gain", {8}, real(1)), shift("shift", {8});
    Param w("w", {3, 8}), b("b", {3});
    init_normal(gain, real(0.5), rng);
    init_normal(shift, real(0.5), rng);
    init_normal(w, real(0.5), rng);
    auto f = [&](Tape& t, Var v) { return t.linear(t.global_avg_pool(t.channel_affine(v, gain, shift)), w, b); };
    std::array<Param*, 4> ps{&gain, &shift, &w, &b};
    FdOptions opt;
    opt.seed = seed;
    CHECK(fd_check(f, x, ps, opt).max_rel_error <= 1e-4);
  }
}

TEST_CASE("fd_check on a full MTCM block at (1,4,3,3,8)") {
  Rng rng(17);
  MtcmParams p = MtcmParams::create(MtcmConfig{8, 3, 2}, rng);
  init_normal(p.alpha, real(0.5), rng);
  const VideoTensor x = oracle::random_tensor(Dims{1, 4, 3, 3, 8}, rng);
  const std::vector<Param*> ps = p.params();
  const FdReport r = fd_check([&](Tape& t, Var v) { return mtcm_forward(t, v, p); }, x, ps);
  CHECK(r.bundles.size() == ps.size() + 1);
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("mutation: a corrupted sigmoid adjoint is caught") {
  Rng rng(19);
  const VideoTensor x = oracle::random_tensor(Dims{1, 3, 3, 3, 4}, rng);
  auto f = [](Tape& t, Var v) { return t.sigmoid(v); };
  CHECK(input_only(f, x, 1) <= 1e-8);
  FaultGuard guard("sigmoid");
  CHECK(input_only(f, x, 1) > 1e-2);
}

TEST_CASE("gradients are bit-identical across repeated passes") {
  Rng rng(23);
  MtcmParams p = MtcmParams::create(MtcmConfig{8, 3, 2}, rng);
  const VideoTensor x = oracle::random_tensor(Dims{2, 6, 3, 3, 8}, rng);
  const VideoTensor seed = oracle::random_tensor(x.dims(), rng);
  auto run = [&] {
    Tape tape;
    const Var in = tape.leaf(x);
    tape.backward(mtcm_forward(tape, in, p), seed);
    std::vector<std::vector<real>> grads{tape.grad(in).values()};
    for (Param* q : p.params()) grads.emplace_back(tape.param_grad(*q).begin(), tape.param_grad(*q).end());
    return grads;
  };
  CHECK(run() == run());
}

TEST_CASE("accumulate_param_grads sums into Param::grad") {
  Rng rng(29);
  ConvLayer l = ConvLayer::create("c", ConvGeometry::same(2, 2, {1, 1, 1}), true, rng);
  const VideoTensor x = oracle::random_tensor(Dims{1, 2, 2, 2, 2}, rng);
  std::array<Param*, 2> ps{&l.weight, &l.bias};
  for (int k = 0; k < 2; ++k) {
    Tape tape;
    const Var y = tape.conv3d(tape.leaf(x, false), l);
    tape.backward(y, VideoTensor(tape.value(y).dims(), real(1)));
    tape.accumulate_param_grads(ps);
  }
  // bias gradient is the number of output sites, twice
  for (real v : l.bias.grad) CHECK(v == 2.0 * 8.0);
}
