#include "can/network.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <sstream>
#include <type_traits>
#include <unordered_map>

#include "can/ops.hpp"

namespace can {

namespace {

// TinyCAN downsamples in the stem; at full 32x32 resolution the first stage alone
// costs more per clip than the rest of the network together.
constexpr std::size_t kTinyStemStride = 2;
constexpr std::size_t kTinyClasses = 5;
constexpr std::size_t kResnetClasses = 48;

ConvGeometry pointwise(std::size_t in, std::size_t out, std::size_t stride = 1) {
  ConvGeometry g;
  g.in_channels = in;
  g.out_channels = out;
  g.stride = {1, stride, stride};
  return g;
}

ConvGeometry spatial(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride) {
  ConvGeometry g;
  g.in_channels = in;
  g.out_channels = out;
  g.kernel = {1, kernel, kernel};
  g.stride = {1, stride, stride};
  g.padding = {0, kernel / 2, kernel / 2};
  return g;
}

ConvGeometry stem_geometry(const StemSpec& s) { return spatial(s.in_channels, s.out_channels, s.kernel, s.stride); }

constexpr std::size_t kPoolWindow = 3, kPoolStride = 2, kPoolPad = 1;

std::string block_prefix(std::size_t stage, std::size_t block) {
  return "s" + std::to_string(stage + 1) + ".b" + std::to_string(block);
}

std::vector<std::vector<BlockSpec>> bottleneck_stages(std::initializer_list<std::array<std::size_t, 4>> layout,
                                                      std::size_t in, bool can) {
  // layout rows: blocks, bottleneck width, output width, stride of the first block
  std::vector<std::vector<BlockSpec>> stages;
  for (const auto& [blocks, mid, out, stride] : layout) {
    std::vector<BlockSpec> stage;
    for (std::size_t b = 0; b < blocks; ++b) {
      stage.push_back(BlockSpec{b == 0 ? in : out, mid, out, b == 0 ? stride : 1, can});
    }
    in = out;
    stages.push_back(std::move(stage));
  }
  return stages;
}

NetSpec tiny(bool can) {
  NetSpec s;
  s.name = can ? "tinycan" : "tinycan-baseline";
  s.stem = StemSpec{1, 16, 3, kTinyStemStride, false};
  s.stages = bottleneck_stages({{2, 16, 16, 1}, {2, 32, 32, 2}, {2, 64, 64, 2}}, 16, can);
  s.frames = 8;
  s.height = s.width = 32;
  s.classes = kTinyClasses;
  return s;
}

NetSpec resnet50(const std::string& name, CanSpec can, bool insert) {
  NetSpec s;
  s.name = name;
  s.stem = StemSpec{3, 64, 7, 2, true};
  s.stages = bottleneck_stages({{3, 64, 256, 1}, {4, 128, 512, 2}, {6, 256, 1024, 2}, {3, 512, 2048, 2}}, 64, insert);
  s.can = can;
  s.frames = 8;
  s.height = s.width = 224;
  s.classes = kResnetClasses;
  return s;
}

CanSpec only(bool pmm, bool lmm, bool gmm, bool mtcm) {
  CanSpec c;
  c.pmm = pmm;
  c.lmm = lmm;
  c.gmm = gmm;
  c.mtcm = mtcm;
  return c;
}

Affine affine_like(const std::string& name, std::size_t channels, real gain) {
  Affine a = Affine::create(name, channels);
  std::fill(a.gain.value.begin(), a.gain.value.end(), gain);
  return a;
}

void push_conv(std::vector<Param*>& out, ConvLayer& c) {
  out.push_back(&c.weight);
  if (c.has_bias()) out.push_back(&c.bias);
}

void push_affine(std::vector<Param*>& out, Affine& a) {
  out.push_back(&a.gain);
  out.push_back(&a.shift);
}

// Per channel over every site of y: gain = target / sqrt(var + 1e-5), shift = -mean * gain.
void fit_affine(Affine& a, const VideoTensor& y, real target) {
  const std::size_t c = y.dims().c, sites = y.dims().sites();
  const std::span<const real> v = y.data();
  for (std::size_t k = 0; k < c; ++k) {
    real mean = 0, var = 0;
    for (std::size_t s = 0; s < sites; ++s) mean += v[s * c + k];
    mean /= real(sites);
    for (std::size_t s = 0; s < sites; ++s) var += (v[s * c + k] - mean) * (v[s * c + k] - mean);
    const real gain = target / std::sqrt(var / real(sites) + real(1e-5));
    a.gain.value[k] = gain;
    a.shift.value[k] = -mean * gain;
  }
}

// With non-const parameters every affine is first refit to the statistics of its input
// (unit spread, or `residual_scale` for the last affine of a residual branch).
template <typename Norm>
Var conv_norm(Tape& tape, Var x, const ConvLayer& conv, Norm& norm, bool relu, real target) {
  const Var y = tape.conv3d(x, conv);
  if constexpr (!std::is_const_v<Norm>) fit_affine(norm, tape.value(y), target);
  const Var z = tape.channel_affine(y, norm.gain, norm.shift);
  return relu ? tape.relu(z) : z;
}

template <typename Block>
Var run_block(Tape& tape, Var x, Block& q, real residual_scale) {
  Var y = conv_norm(tape, x, q.reduce, q.reduce_norm, true, 1);
  y = conv_norm(tape, y, q.spatial, q.spatial_norm, true, 1);
  if (q.gscm) y = gscm_forward(tape, y, *q.gscm);
  if (q.mtcm) y = mtcm_forward(tape, y, *q.mtcm);
  y = conv_norm(tape, y, q.expand, q.expand_norm, false, residual_scale);
  const Var skip = q.shortcut ? conv_norm(tape, x, *q.shortcut, *q.shortcut_norm, false, 1) : x;
  return tape.relu(tape.add(y, skip));
}

template <typename Net>
Var run_net(Tape& tape, Var x, Net& p, real residual_scale) {
  require_same_dims(tape.value(x).dims(), p.spec.input_dims(tape.value(x).dims().n), "network input");
  Var h = conv_norm(tape, x, p.stem, p.stem_norm, true, 1);
  if (p.spec.stem.max_pool) h = tape.max_pool_spatial(h, kPoolWindow, kPoolStride, kPoolPad);
  for (auto& q : p.blocks) h = run_block(tape, h, q, residual_scale);
  return tape.linear(tape.global_avg_pool(h), p.fc_weight, p.fc_bias);
}

}  // namespace

std::string NetSpec::canonical() const {
  std::ostringstream o;
  o << "name=" << name << '\n'
    << "stem=" << stem.in_channels << ',' << stem.out_channels << ',' << stem.kernel << ',' << stem.stride << ','
    << stem.max_pool << '\n';
  for (std::size_t s = 0; s < stages.size(); ++s)
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      const BlockSpec& k = stages[s][b];
      o << block_prefix(s, b) << '=' << k.in_channels << ',' << k.bottleneck_channels << ',' << k.out_channels << ','
        << k.spatial_stride << ',' << k.insert_can << '\n';
    }
  o << "can=" << can.pmm << ',' << can.lmm << ',' << can.gmm << ',' << can.mtcm << ',' << can.branches << ','
    << can.reduction << '\n'
    << "input=" << frames << ',' << height << ',' << width << '\n'
    << "classes=" << classes << '\n';
  return o.str();
}

std::uint64_t NetSpec::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void NetSpec::validate() const {
  auto fail = [this](const std::string& why) { throw ConfigError("network '" + name + "': " + why); };
  if (frames == 0 || height == 0 || width == 0) fail("empty input extent");
  if (classes < 2) fail("need at least two classes");
  if (stem.in_channels == 0 || stem.out_channels == 0 || stem.kernel == 0 || stem.stride == 0) fail("empty stem");
  if (stages.empty()) fail("no stages");
  std::size_t width_in = stem.out_channels;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (stages[s].empty()) fail("stage " + std::to_string(s + 1) + " has no blocks");
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      const BlockSpec& k = stages[s][b];
      const std::string where = block_prefix(s, b);
      if (k.in_channels != width_in) fail(where + " expects " + std::to_string(k.in_channels) + " channels, gets " +
                                          std::to_string(width_in));
      if (k.bottleneck_channels == 0 || k.out_channels == 0 || k.spatial_stride == 0) fail(where + " empty extent");
      if (k.insert_can && can.any()) {
        if (can.reduction == 0 || can.branches == 0) fail("CAN needs reduction >= 1 and branches >= 1");
        const std::size_t step = can.gscm() ? 4 * can.reduction : can.reduction;
        if (k.bottleneck_channels % step != 0) {
          fail(where + " width " + std::to_string(k.bottleneck_channels) + " is not divisible by " +
               std::to_string(step));
        }
      }
      width_in = k.out_channels;
    }
  }
  // Surfaces collapsing spatial extents as a ShapeError before any allocation.
  (void)count_cost(*this);
}

std::vector<std::string> spec_names() {
  return {"tinycan",       "tinycan-baseline", "resnet50",      "baseline",     "resnet50can",
          "resnet50-mtcm", "resnet50-gscm",    "resnet50-pmm",  "resnet50-lmm", "resnet50-gmm"};
}

NetSpec named_spec(const std::string& name, std::size_t frames) {
  NetSpec s;
  if (name == "tinycan") s = tiny(true);
  else if (name == "tinycan-baseline") s = tiny(false);
  else if (name == "resnet50" || name == "baseline") s = resnet50("resnet50", CanSpec{}, false);
  else if (name == "resnet50can") s = resnet50(name, CanSpec{}, true);
  else if (name == "resnet50-mtcm") s = resnet50(name, only(false, false, false, true), true);
  else if (name == "resnet50-gscm") s = resnet50(name, only(true, true, true, false), true);
  else if (name == "resnet50-pmm") s = resnet50(name, only(true, false, false, false), true);
  else if (name == "resnet50-lmm") s = resnet50(name, only(false, true, false, false), true);
  else if (name == "resnet50-gmm") s = resnet50(name, only(false, false, true, false), true);
  else {
    std::string known;
    for (const auto& n : spec_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown network '" + name + "' (known: " + known + ")");
  }
  if (frames != 0) s.frames = frames;
  return s;
}

Affine Affine::create(const std::string& name, std::size_t channels) {
  return Affine{Param(name + ".gain", {channels}, real(1)), Param(name + ".shift", {channels}, real(0))};
}

NetParams NetParams::create(const NetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  NetParams p;
  p.spec = spec;
  p.stem = ConvLayer::create("stem.conv", stem_geometry(spec.stem), false, rng);
  p.stem_norm = Affine::create("stem.norm", spec.stem.out_channels);
  for (std::size_t s = 0; s < spec.stages.size(); ++s)
    for (std::size_t b = 0; b < spec.stages[s].size(); ++b) {
      const BlockSpec& k = spec.stages[s][b];
      const std::string pre = block_prefix(s, b);
      BlockParams q;
      q.spec = k;
      q.reduce = ConvLayer::create(pre + ".reduce", pointwise(k.in_channels, k.bottleneck_channels), false, rng);
      q.reduce_norm = Affine::create(pre + ".reduce_norm", k.bottleneck_channels);
      q.spatial = ConvLayer::create(pre + ".spatial",
                                    spatial(k.bottleneck_channels, k.bottleneck_channels, 3, k.spatial_stride), false,
                                    rng);
      q.spatial_norm = Affine::create(pre + ".spatial_norm", k.bottleneck_channels);
      if (k.insert_can && spec.can.gscm()) {
        GscmConfig g{k.bottleneck_channels, spec.can.reduction, spec.can.pmm, spec.can.lmm, spec.can.gmm};
        q.gscm = GscmParams::create(g, rng, pre + ".gscm");
      }
      if (k.insert_can && spec.can.mtcm) {
        q.mtcm = MtcmParams::create(MtcmConfig{k.bottleneck_channels, spec.can.branches, spec.can.reduction}, rng,
                                    pre + ".mtcm");
      }
      q.expand = ConvLayer::create(pre + ".expand", pointwise(k.bottleneck_channels, k.out_channels), false, rng);
      // Zero gain on the last affine: every residual block starts as the identity, which keeps
      // the un-normalized stack trainable.
      q.expand_norm = affine_like(pre + ".expand_norm", k.out_channels, real(0));
      if (k.projects()) {
        q.shortcut = ConvLayer::create(pre + ".shortcut", pointwise(k.in_channels, k.out_channels, k.spatial_stride),
                                       false, rng);
        q.shortcut_norm = Affine::create(pre + ".shortcut_norm", k.out_channels);
      }
      p.blocks.push_back(std::move(q));
    }
  const std::size_t feat = spec.stages.back().back().out_channels;
  p.fc_weight = Param("fc.weight", {spec.classes, feat});
  init_normal(p.fc_weight, real(1) / std::sqrt(real(feat)), rng);
  p.fc_bias = Param("fc.bias", {spec.classes});
  return p;
}

std::vector<Param*> NetParams::params() {
  std::vector<Param*> out;
  push_conv(out, stem);
  push_affine(out, stem_norm);
  for (BlockParams& q : blocks) {
    push_conv(out, q.reduce);
    push_affine(out, q.reduce_norm);
    push_conv(out, q.spatial);
    push_affine(out, q.spatial_norm);
    if (q.gscm)
      for (Param* x : q.gscm->params()) out.push_back(x);
    if (q.mtcm)
      for (Param* x : q.mtcm->params()) out.push_back(x);
    push_conv(out, q.expand);
    push_affine(out, q.expand_norm);
    if (q.shortcut) {
      push_conv(out, *q.shortcut);
      push_affine(out, *q.shortcut_norm);
    }
  }
  out.push_back(&fc_weight);
  out.push_back(&fc_bias);
  return out;
}

std::vector<const Param*> NetParams::params() const {
  // The non-const overload only takes addresses.
  const std::vector<Param*> ps = const_cast<NetParams*>(this)->params();
  return {ps.begin(), ps.end()};
}

std::size_t NetParams::scalar_count() const {
  std::size_t n = 0;
  for (const Param* q : params()) n += q->size();
  return n;
}

void NetParams::zero_grad() {
  for (Param* q : params()) q->zero_grad();
}

Var block_forward(Tape& tape, Var x, const BlockParams& q) { return run_block(tape, x, q, 0); }

Var net_forward(Tape& tape, Var x, const NetParams& p) { return run_net(tape, x, p, 0); }

VideoTensor net_forward(const NetParams& p, const VideoTensor& x) {
  Tape tape;
  return tape.value(net_forward(tape, tape.leaf(x, false), p));
}

void calibrate_norms(NetParams& p, const VideoTensor& batch, real residual_scale) {
  if (!(residual_scale >= 0)) throw ConfigError("calibrate_norms: residual scale must be >= 0");
  Tape tape;
  run_net(tape, tape.leaf(batch, false), p, residual_scale);
}

void suppress_attention(NetParams& p, real bias) {
  for (BlockParams& q : p.blocks) {
    if (q.gscm) suppress_attention(*q.gscm, bias);
    if (q.mtcm) suppress_attention(*q.mtcm, bias);
  }
}

std::size_t copy_matching_params(const NetParams& from, NetParams& to) {
  std::unordered_map<std::string, const Param*> by_name;
  for (const Param* q : from.params()) by_name.emplace(q->name, q);
  std::size_t copied = 0;
  for (Param* q : to.params()) {
    const auto it = by_name.find(q->name);
    if (it == by_name.end() || it->second->shape != q->shape) continue;
    q->value = it->second->value;
    ++copied;
  }
  return copied;
}

std::uint64_t CostReport::params() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.params;
  return n;
}

std::uint64_t CostReport::macs() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.macs;
  return n;
}

namespace {

class CostWalker {
 public:
  explicit CostWalker(CostReport& r) : r_(r) {}

  // Returns the output dims; MACs = output elements * kernel volume * inputs per group.
  Dims conv(const std::string& name, const Dims& in, const ConvGeometry& g, bool bias) {
    g.validate();
    const Dims out = g.output_dims(in);
    const std::uint64_t macs = std::uint64_t(out.size()) * g.kernel.volume() * g.in_per_group();
    r_.layers.push_back(LayerCost{name, g.weight_count() + (bias ? g.out_channels : 0), macs});
    return out;
  }
  void affine(const std::string& name, std::size_t channels) { r_.layers.push_back(LayerCost{name, 2 * channels, 0}); }
  void scalars(const std::string& name, std::size_t n) { r_.layers.push_back(LayerCost{name, n, 0}); }

  // PMM and GMM share this pipeline; GMM runs it on the (T, 1, 1) descriptor.
  void motion_path(const std::string& name, const Dims& at, std::size_t cg, std::size_t cr) {
    Dims d = conv(name + ".reduce", Dims{at.n, at.t, at.h, at.w, cg}, ConvGeometry::same(cg, cr, {1, 1, 1}), true);
    d.c = 2 * cr;
    d = conv(name + ".temporal", d, ConvGeometry::same(2 * cr, cr, {3, 1, 1}), true);
    conv(name + ".expand", d, ConvGeometry::same(cr, cg, {1, 1, 1}), true);
  }

 private:
  CostReport& r_;
};

}  // namespace

CostReport count_cost(const NetSpec& spec) {
  CostReport report;
  CostWalker w(report);
  Dims d = w.conv("stem.conv", spec.input_dims(1), stem_geometry(spec.stem), false);
  w.affine("stem.norm", spec.stem.out_channels);
  if (spec.stem.max_pool) {
    auto pooled = [](std::size_t e) {
      if (e + 2 * kPoolPad < kPoolWindow) throw ShapeError("max pool window exceeds the padded input");
      return (e + 2 * kPoolPad - kPoolWindow) / kPoolStride + 1;
    };
    d.h = pooled(d.h);
    d.w = pooled(d.w);
  }
  for (std::size_t s = 0; s < spec.stages.size(); ++s)
    for (std::size_t b = 0; b < spec.stages[s].size(); ++b) {
      const BlockSpec& k = spec.stages[s][b];
      const std::string pre = block_prefix(s, b);
      const std::size_t mid = k.bottleneck_channels;
      Dims y = w.conv(pre + ".reduce", d, pointwise(k.in_channels, mid), false);
      w.affine(pre + ".reduce_norm", mid);
      y = w.conv(pre + ".spatial", y, spatial(mid, mid, 3, k.spatial_stride), false);
      w.affine(pre + ".spatial_norm", mid);
      if (k.insert_can && spec.can.gscm()) {
        const std::size_t cg = mid / 4, cr = cg / spec.can.reduction;
        if (spec.can.pmm) w.motion_path(pre + ".gscm.pmm", y, cg, cr);
        if (spec.can.lmm) w.conv(pre + ".gscm.lmm.conv", Dims{y.n, y.t, y.h, y.w, 2}, ConvGeometry::same(2, 1, {3, 3, 3}), true);
        if (spec.can.gmm) w.motion_path(pre + ".gscm.gmm", Dims{y.n, y.t, 1, 1, cg}, cg, cr);
      }
      if (k.insert_can && spec.can.mtcm) {
        const std::size_t cr = mid / spec.can.reduction;
        Dims r = w.conv(pre + ".mtcm.reduce", y, ConvGeometry::same(mid, cr, {1, 1, 1}), true);
        for (std::size_t i = 1; i <= spec.can.branches; ++i) {
          w.conv(pre + ".mtcm.branch" + std::to_string(i), r, ConvGeometry::same(cr, cr, {3, 1, 1}, {i, 1, 1}, cr),
                 false);
        }
        w.scalars(pre + ".mtcm.alpha", spec.can.branches);
        w.conv(pre + ".mtcm.expand", r, ConvGeometry::same(cr, mid, {1, 1, 1}), true);
      }
      const Dims e = w.conv(pre + ".expand", y, pointwise(mid, k.out_channels), false);
      w.affine(pre + ".expand_norm", k.out_channels);
      if (k.projects()) {
        w.conv(pre + ".shortcut", d, pointwise(k.in_channels, k.out_channels, k.spatial_stride), false);
        w.affine(pre + ".shortcut_norm", k.out_channels);
      }
      d = e;
    }
  const std::uint64_t feat = d.c;
  report.layers.push_back(LayerCost{"fc", feat * spec.classes + spec.classes, feat * spec.classes});
  return report;
}

}  // namespace can
