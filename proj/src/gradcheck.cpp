#include "can/gradcheck.hpp"

#include <array>
#include <chrono>
#include <functional>
#include <limits>
#include <map>
#include <random>

#include "can/fd_check.hpp"
#include "can/gscm.hpp"
#include "can/mtcm.hpp"
#include "can/network.hpp"

namespace can {
namespace {

VideoTensor uniform(const Dims& d, Rng& rng, real lo = -1, real hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  VideoTensor x(d);
  for (real& v : x.data()) v = real(u(rng));
  return x;
}

template <typename P>
void randomize_biases(P& p, Rng& rng) {
  for (Param* q : p.params())
    if (q->shape.size() == 1) init_normal(*q, real(0.3), rng);
}

// Fresh blocks are identities (zero final gain); every path should carry gradient here.
NetParams live_tinycan(std::uint64_t seed) {
  NetParams p = NetParams::create(named_spec("tinycan"), seed);
  Rng rng(seed + 100);
  for (BlockParams& q : p.blocks) {
    init_normal(q.expand_norm.gain, real(0.5), rng);
    init_normal(q.expand_norm.shift, real(0.1), rng);
  }
  init_normal(p.fc_bias, real(0.1), rng);
  return p;
}

struct Accumulator {
  GradcheckResult& r;

  void add(const std::string& label, const FdReport& rep) {
    for (const FdBundleResult& b : rep.bundles) {
      r.checked += b.checked;
      // written so that a NaN error also lands here
      if (!(b.max_rel_error <= r.max_rel_error)) {
        r.max_rel_error = b.max_rel_error;
        r.worst = label + "/" + b.name;
      }
    }
  }
};

FdOptions options(std::uint64_t seed, std::size_t coords = 64) {
  FdOptions o;
  o.seed = seed;
  o.coords_per_bundle = coords;
  return o;
}

void check_input(Accumulator& acc, const std::string& label, const DifferentiableBlock& f, const VideoTensor& x,
                 std::uint64_t seed) {
  acc.add(label, fd_check(f, x, std::span<Param* const>{}, options(seed)));
}

void conv3d_variants(Accumulator& acc, std::uint64_t seed) {
  Rng rng(seed);
  const VideoTensor x = uniform(Dims{2, 5, 6, 6, 8}, rng);
  auto strided = [](ConvGeometry g, std::size_t s) {
    g.stride = {1, s, s};
    return g;
  };
  const std::vector<std::pair<std::string, ConvGeometry>> variants{
      {"pointwise", ConvGeometry::same(8, 6, {1, 1, 1})},
      {"pointwise_s2", strided(ConvGeometry::same(8, 6, {1, 1, 1}), 2)},
      {"spatial3x3", ConvGeometry::same(8, 6, {1, 3, 3})},
      {"spatial3x3_s2", strided(ConvGeometry::same(8, 6, {1, 3, 3}), 2)},
      {"temporal3", ConvGeometry::same(8, 4, {3, 1, 1})},
      {"depthwise_d1", ConvGeometry::same(8, 8, {3, 1, 1}, {1, 1, 1}, 8)},
      {"depthwise_d2", ConvGeometry::same(8, 8, {3, 1, 1}, {2, 1, 1}, 8)},
      {"depthwise_d3", ConvGeometry::same(8, 8, {3, 1, 1}, {3, 1, 1}, 8)},
      {"grouped3x3", ConvGeometry::same(8, 4, {1, 3, 3}, {1, 1, 1}, 2)},
      {"dense3x3x3", ConvGeometry::same(8, 2, {3, 3, 3})},
  };
  for (const auto& [label, g] : variants) {
    ConvLayer l = ConvLayer::create(label, g, true, rng);
    init_normal(l.bias, real(0.3), rng);
    std::array<Param*, 2> ps{&l.weight, &l.bias};
    acc.add(label, fd_check([&](Tape& t, Var v) { return t.conv3d(v, l); }, x, ps, options(seed)));
  }
}

void pools(Accumulator& acc, std::uint64_t seed) {
  Rng rng(seed);
  const VideoTensor x = uniform(Dims{2, 5, 6, 6, 8}, rng);
  check_input(acc, "channel_pool", [](Tape& t, Var v) { return t.channel_pool(v); }, x, seed);
  check_input(acc, "spatial_pool", [](Tape& t, Var v) { return t.spatial_pool(v); }, x, seed);
  check_input(acc, "global_avg_pool", [](Tape& t, Var v) { return t.global_avg_pool(v); }, x, seed);
  check_input(acc, "max_pool", [](Tape& t, Var v) { return t.max_pool_spatial(v, 3, 2, 1); }, x, seed);
}

void softmax(Accumulator& acc, std::uint64_t seed) {
  Rng rng(seed);
  const VideoTensor x = uniform(Dims{2, 5, 4, 4, 8}, rng);
  const VideoTensor other = uniform(x.dims(), rng);
  Param alpha("alpha", {3});
  init_normal(alpha, real(1), rng);
  auto fuse = [&](Tape& t, Var v) {
    const std::array<Var, 3> xs{v, t.leaf(other, false), t.sigmoid(v)};
    return t.softmax_weighted_sum(xs, alpha);
  };
  std::array<Param*, 1> ps{&alpha};
  acc.add("branch_fusion", fd_check(fuse, x, ps, options(seed)));

  const VideoTensor logits = uniform(Dims{3, 1, 1, 1, 5}, rng, -2, 2);
  const std::array<std::size_t, 3> labels{0, 3, 4};
  check_input(acc, "cross_entropy", [&](Tape& t, Var v) { return t.cross_entropy(v, labels); }, logits, seed);
}

GscmParams gscm_params(Rng& rng) {
  GscmParams p = GscmParams::create(GscmConfig{16, 2}, rng);
  randomize_biases(p, rng);
  return p;
}

void gscm_path(Accumulator& acc, std::uint64_t seed, const std::string& which) {
  Rng rng(seed);
  GscmParams p = gscm_params(rng);
  const VideoTensor g = uniform(Dims{1, 5, 4, 4, 4}, rng);
  const VideoTensor f = uniform(Dims{1, 5, 4, 4, 16}, rng);
  const FdOptions opt = options(seed);
  if (which == "pmm") {
    const std::vector<Param*> ps = p.pmm->params();
    acc.add("pmm", fd_check([&](Tape& t, Var v) { return pmm_forward(t, v, *p.pmm); }, g, ps, opt));
  } else if (which == "lmm") {
    const std::vector<Param*> ps = p.lmm->params();
    acc.add("lmm", fd_check([&](Tape& t, Var v) { return lmm_forward(t, v, *p.lmm); }, g, ps, opt));
  } else if (which == "gmm") {
    const std::vector<Param*> ps = p.gmm->params();
    acc.add("gmm", fd_check([&](Tape& t, Var v) { return gmm_forward(t, v, *p.gmm); }, g, ps, opt));
  } else {
    const std::vector<Param*> ps = p.params();
    acc.add("gscm", fd_check([&](Tape& t, Var v) { return gscm_forward(t, v, p); }, f, ps, opt));
  }
}

void mtcm(Accumulator& acc, std::uint64_t seed) {
  Rng rng(seed);
  MtcmParams p = MtcmParams::create(MtcmConfig{8, 3, 2}, rng);
  randomize_biases(p, rng);
  init_normal(p.alpha, real(0.5), rng);
  const VideoTensor x = uniform(Dims{1, 7, 3, 3, 8}, rng);
  const std::vector<Param*> ps = p.params();
  acc.add("mtcm", fd_check([&](Tape& t, Var v) { return mtcm_forward(t, v, p); }, x, ps, options(seed)));
}

// The projecting, striding block of stage 2, with every module.
void block(Accumulator& acc, std::uint64_t seed) {
  NetParams p = live_tinycan(seed);
  const BlockParams& q = p.blocks[2];
  Rng rng(seed);
  const VideoTensor x = uniform(Dims{1, 8, 8, 8, 16}, rng, 0, 1);
  std::vector<Param*> ps;
  for (Param* r : p.params())
    if (r->name.starts_with("s2.b0.")) ps.push_back(r);
  acc.add("s2.b0", fd_check([&](Tape& t, Var v) { return block_forward(t, v, q); }, x, ps, options(seed, 16)));
}

// Cross-entropy of the whole network; 3 coordinates in each of the ~180 bundles.
void tinycan(Accumulator& acc, std::uint64_t seed) {
  NetParams p = live_tinycan(seed);
  Rng rng(seed);
  const VideoTensor x = uniform(p.spec.input_dims(1), rng, 0, 1);
  const std::array<std::size_t, 1> label{seed % p.spec.classes};
  const std::vector<Param*> ps = p.params();
  acc.add("loss", fd_check([&](Tape& t, Var v) { return t.cross_entropy(net_forward(t, v, p), label); }, x, ps,
                           options(seed, 3)));
}

using Runner = std::function<void(Accumulator&, std::uint64_t)>;

const std::map<std::string, Runner>& runners() {
  static const std::map<std::string, Runner> m{
      {"conv3d", conv3d_variants},
      {"temporal_diff",
       [](Accumulator& acc, std::uint64_t seed) {
         Rng rng(seed);
         check_input(acc, "temporal_diff", [](Tape& t, Var v) { return t.temporal_diff(v); },
                     uniform(Dims{2, 5, 4, 4, 8}, rng), seed);
       }},
      {"pools", pools},
      {"sigmoid",
       [](Accumulator& acc, std::uint64_t seed) {
         Rng rng(seed);
         check_input(acc, "sigmoid", [](Tape& t, Var v) { return t.sigmoid(v); },
                     uniform(Dims{2, 5, 4, 4, 8}, rng, -4, 4), seed);
       }},
      {"softmax", softmax},
      {"pmm", [](Accumulator& acc, std::uint64_t seed) { gscm_path(acc, seed, "pmm"); }},
      {"lmm", [](Accumulator& acc, std::uint64_t seed) { gscm_path(acc, seed, "lmm"); }},
      {"gmm", [](Accumulator& acc, std::uint64_t seed) { gscm_path(acc, seed, "gmm"); }},
      {"gscm", [](Accumulator& acc, std::uint64_t seed) { gscm_path(acc, seed, "gscm"); }},
      {"mtcm", mtcm},
      {"block", block},
      {"tinycan", tinycan},
  };
  return m;
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"conv3d", "temporal_diff", "pools", "sigmoid", "softmax", "pmm",
                                              "lmm",    "gmm",           "gscm",  "mtcm",    "block",   "tinycan"};
  return names;
}

GradcheckResult gradcheck(const std::string& module, std::uint64_t seed) {
  const auto it = runners().find(module);
  if (it == runners().end()) throw ConfigError("gradcheck: unknown module '" + module + "'");
  GradcheckResult r;
  r.module = module;
  r.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  Accumulator acc{r};
  it->second(acc, seed);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace can
