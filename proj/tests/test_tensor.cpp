#include <cmath>
#include <numeric>
#include <random>

#include "can/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace can;

TEST_CASE("flat offset is row-major (N,T,H,W,C)") {
  VideoTensor x(Dims{2, 3, 4, 5, 6});
  CHECK(x.offset(1, 2, 3, 4, 5) == ((((1 * 3 + 2) * 4 + 3) * 5 + 4) * 6 + 5));
  CHECK(x.size() == 2 * 3 * 4 * 5 * 6);
  CHECK_THROWS_AS(VideoTensor(Dims{1, 0, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(VideoTensor(Dims{1, 1, 1, 1, 2}, std::vector<real>{1.0}), ShapeError);
}

TEST_CASE("temporal_diff") {
  SUBCASE("constant sequence gives zeros") {
    VideoTensor x(Dims{2, 5, 3, 3, 4}, real(0.7));
    const VideoTensor d = temporal_diff(x);
    for (real v : d.data()) CHECK(v == 0.0);
  }
  SUBCASE("linear ramp") {
    VideoTensor x(Dims{1, 4, 1, 1, 1});
    for (std::size_t t = 0; t < 4; ++t) x(0, t, 0, 0, 0) = real(t);
    const VideoTensor d = temporal_diff(x);
    CHECK(d(0, 0, 0, 0, 0) == 1.0);
    CHECK(d(0, 1, 0, 0, 0) == 1.0);
    CHECK(d(0, 2, 0, 0, 0) == 1.0);
    CHECK(d(0, 3, 0, 0, 0) == 0.0);
  }
  SUBCASE("matches reference loop exactly") {
    std::mt19937_64 rng(11);
    const VideoTensor x = oracle::random_tensor(Dims{2, 8, 3, 4, 5}, rng);
    CHECK(temporal_diff(x) == oracle::temporal_diff(x));
  }
  SUBCASE("T = 1 is all zero") {
    VideoTensor x(Dims{1, 1, 2, 2, 3}, real(4));
    CHECK(temporal_diff(x).max_abs() == 0.0);
  }
}

TEST_CASE("channel_pool") {
  SUBCASE("C = 1 copies the channel into mean and max") {
    std::mt19937_64 rng(3);
    const VideoTensor x = oracle::random_tensor(Dims{1, 2, 3, 3, 1}, rng);
    const VideoTensor p = channel_pool(x);
    CHECK(p.dims().c == 2);
    for (std::size_t s = 0; s < x.dims().sites(); ++s) {
      CHECK(p.data()[2 * s] == x.data()[s]);
      CHECK(p.data()[2 * s + 1] == x.data()[s]);
    }
  }
  SUBCASE("x(c) = c for C = 4") {
    VideoTensor x(Dims{1, 2, 2, 2, 4});
    for (std::size_t s = 0; s < x.dims().sites(); ++s)
      for (std::size_t c = 0; c < 4; ++c) x.data()[s * 4 + c] = real(c);
    const VideoTensor p = channel_pool(x);
    for (std::size_t s = 0; s < x.dims().sites(); ++s) {
      CHECK(p.data()[2 * s] == 1.5);
      CHECK(p.data()[2 * s + 1] == 3.0);
    }
  }
  SUBCASE("matches reduction oracle") {
    std::mt19937_64 rng(5);
    const VideoTensor x = oracle::random_tensor(Dims{2, 3, 4, 4, 7}, rng);
    CHECK(max_abs_diff(channel_pool(x), oracle::channel_pool(x)) <= 1e-15);
  }
}

TEST_CASE("spatial_pool") {
  SUBCASE("H = W = 1 is the identity") {
    std::mt19937_64 rng(9);
    const VideoTensor x = oracle::random_tensor(Dims{2, 3, 1, 1, 5}, rng);
    CHECK(spatial_pool(x) == x);
  }
  SUBCASE("checkerboard of 0/2 averages to 1") {
    VideoTensor x(Dims{1, 2, 4, 6, 3});
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 6; ++w)
          for (std::size_t c = 0; c < 3; ++c) x(0, t, h, w, c) = (h + w) % 2 == 0 ? 0.0 : 2.0;
    const VideoTensor p = spatial_pool(x);
    for (real v : p.data()) CHECK(v == 1.0);
  }
  SUBCASE("matches naive mean loop") {
    std::mt19937_64 rng(13);
    const VideoTensor x = oracle::random_tensor(Dims{2, 4, 5, 3, 6}, rng);
    CHECK(max_abs_diff(spatial_pool(x), oracle::spatial_pool(x)) <= 1e-15);
  }
}

TEST_CASE("concat and split") {
  std::mt19937_64 rng(17);
  const VideoTensor a = oracle::random_tensor(Dims{2, 3, 2, 2, 3}, rng);
  const VideoTensor b = oracle::random_tensor(Dims{2, 3, 2, 2, 5}, rng);

  SUBCASE("single tensor is unchanged") {
    const std::vector<VideoTensor> one{a};
    CHECK(concat_channels(one) == a);
  }
  SUBCASE("concat then slice recovers both inputs") {
    const std::vector<VideoTensor> ab{a, b};
    const VideoTensor c = concat_channels(ab);
    CHECK(slice_channels(c, 0, 3) == a);
    CHECK(slice_channels(c, 3, 8) == b);
  }
  SUBCASE("four groups: output channel c comes from input floor(4c/C)") {
    std::vector<VideoTensor> parts;
    for (int k = 0; k < 4; ++k) parts.push_back(VideoTensor(Dims{1, 2, 2, 2, 3}, real(k)));
    const VideoTensor c = concat_channels(parts);
    const std::size_t cc = c.dims().c;
    for (std::size_t s = 0; s < c.dims().sites(); ++s)
      for (std::size_t ch = 0; ch < cc; ++ch) CHECK(c.data()[s * cc + ch] == real(4 * ch / cc));
  }
  SUBCASE("errors") {
    const std::vector<VideoTensor> bad{a, VideoTensor(Dims{2, 3, 2, 3, 1})};
    CHECK_THROWS_AS(concat_channels(bad), ShapeError);
    CHECK_THROWS_AS(concat_channels(std::vector<VideoTensor>{}), ShapeError);
    CHECK_THROWS_AS(split_channels(b, 4), ShapeError);
  }
}

TEST_CASE("property: split and concat are exact inverses") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 25; ++trial) {
    std::uniform_int_distribution<std::size_t> ext(1, 4), grp(1, 4);
    const Dims d{ext(rng), ext(rng), ext(rng), ext(rng), 4 * grp(rng)};
    const VideoTensor x = oracle::random_tensor(d, rng, -1e3, 1e3);
    const std::vector<VideoTensor> parts = split_channels(x, 4);
    CHECK(concat_channels(parts) == x);
    const std::vector<VideoTensor> again = split_channels(concat_channels(parts), 4);
    for (int k = 0; k < 4; ++k) CHECK(again[k] == parts[k]);
  }
}

TEST_CASE("sigmoid and softmax") {
  CHECK(sigmoid(real(0)) == 0.5);
  CHECK(sigmoid(real(-800)) >= 0.0);
  CHECK(std::isfinite(sigmoid(real(800))));

  SUBCASE("equal logits give uniform weights") {
    for (std::size_t n : {1u, 3u, 5u}) {
      const std::vector<real> logits(n, real(1) / real(n));
      for (real v : softmax(logits)) CHECK(v == doctest::Approx(1.0 / double(n)).epsilon(1e-15));
    }
  }
  SUBCASE("property: probability vector with preserved argmax") {
    std::mt19937_64 rng(23);
    std::normal_distribution<double> normal(0.0, 10.0);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<real> logits(1 + trial % 7);
      for (real& v : logits) v = real(normal(rng));
      const std::vector<real> p = softmax(logits);
      const real total = std::accumulate(p.begin(), p.end(), real(0));
      CHECK(std::abs(total - 1.0) <= 1e-12);
      for (real v : p) CHECK(v >= 0.0);
      CHECK(std::max_element(p.begin(), p.end()) - p.begin() ==
            std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
  }
}

TEST_CASE("hadamard, add and broadcasting") {
  std::mt19937_64 rng(29);
  const VideoTensor x = oracle::random_tensor(Dims{1, 3, 4, 4, 6}, rng);

  SUBCASE("attention at sigmoid(-30) leaves the residual unchanged") {
    const VideoTensor gate = sigmoid(VideoTensor(x.dims(), real(-30)));
    const VideoTensor y = add(hadamard(x, gate), x);
    CHECK(max_abs_diff(y, x) <= 1e-9);
  }
  SUBCASE("spatially shared attention (H = W = 1)") {
    const VideoTensor a = oracle::random_tensor(Dims{1, 3, 1, 1, 6}, rng);
    CHECK(max_abs_diff(add(hadamard(x, a), x), oracle::recalibrate(x, a)) <= 1e-15);
  }
  SUBCASE("channel shared attention (C = 1)") {
    const VideoTensor a = oracle::random_tensor(Dims{1, 3, 4, 4, 1}, rng);
    CHECK(max_abs_diff(add(hadamard(x, a), x), oracle::recalibrate(x, a)) <= 1e-15);
  }
  SUBCASE("reduce_to is the adjoint of broadcasting") {
    const VideoTensor a = oracle::random_tensor(Dims{1, 3, 1, 1, 6}, rng);
    const VideoTensor g = oracle::random_tensor(x.dims(), rng);
    // <g, broadcast(a)> == <reduce_to(g), a>
    const VideoTensor ones(x.dims(), real(1));
    const VideoTensor ba = hadamard(ones, a);
    real lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < g.size(); ++i) lhs += g.data()[i] * ba.data()[i];
    const VideoTensor r = reduce_to(g, a.dims());
    for (std::size_t i = 0; i < a.size(); ++i) rhs += r.data()[i] * a.data()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
  SUBCASE("non-broadcastable shapes are rejected") {
    CHECK_THROWS_AS(hadamard(x, VideoTensor(Dims{1, 3, 4, 1, 6})), ShapeError);
    CHECK_THROWS_AS(add(x, VideoTensor(Dims{1, 2, 4, 4, 6})), ShapeError);
    CHECK_THROWS_AS(hadamard(x, VideoTensor(Dims{1, 3, 4, 4, 3})), ShapeError);
  }
}

TEST_CASE("property: outputs stay finite for bounded inputs") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const VideoTensor x = oracle::random_tensor(Dims{1, 4, 3, 3, 8}, rng, -1e3, 1e3);
    CHECK(sigmoid(x).all_finite());
    CHECK(channel_pool(x).all_finite());
    CHECK(spatial_pool(x).all_finite());
    CHECK(temporal_diff(x).all_finite());
  }
}

TEST_CASE("max_pool_spatial picks the window maximum") {
  VideoTensor x(Dims{1, 1, 4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) x.data()[i] = real(i);
  const VideoTensor y = max_pool_spatial(x, 3, 2, 1);
  CHECK(y.dims() == Dims{1, 1, 2, 2, 1});
  CHECK(y(0, 0, 0, 0, 0) == 5.0);
  CHECK(y(0, 0, 1, 1, 0) == 15.0);
}

TEST_CASE("cross entropy of uniform logits is log K") {
  const VideoTensor logits(Dims{2, 1, 1, 1, 5});
  const std::vector<std::size_t> labels{0, 3};
  const CrossEntropy ce = softmax_cross_entropy(logits, labels);
  CHECK(ce.loss == doctest::Approx(std::log(5.0)));
  CHECK(ce.grad(0, 0, 0, 0, 0) == doctest::Approx((0.2 - 1.0) / 2));
}
