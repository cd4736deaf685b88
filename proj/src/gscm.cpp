#include "can/gscm.hpp"

#include <algorithm>
#include <array>
#include <string>

namespace can {

namespace {

void check_reducible(std::size_t channels, std::size_t reduction, const char* what) {
  if (reduction == 0 || channels == 0 || channels % reduction != 0) {
    throw ShapeError(std::string(what) + ": channels " + std::to_string(channels) + " not divisible by r=" +
                     std::to_string(reduction));
  }
}

void check_channels(const Tape& tape, Var f, std::size_t expected, const char* what) {
  const std::size_t got = tape.value(f).dims().c;
  if (got != expected) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(got) + " channels, module expects " +
                     std::to_string(expected));
  }
}

std::size_t conv_scalars(const ConvLayer& l) { return l.weight.size() + l.bias.size(); }

// Shared reduce -> concat(temporal diff) -> temporal conv -> expand pipeline of PMM and GMM.
Var motion_logits(Tape& tape, Var x, const ConvLayer& reduce, const ConvLayer& temporal, const ConvLayer& expand) {
  const Var r = tape.conv3d(x, reduce);
  const std::array<Var, 2> parts{r, tape.temporal_diff(r)};
  const Var c = tape.concat(parts);
  return tape.conv3d(tape.conv3d(c, temporal), expand);
}

template <typename P>
VideoTensor run_pure(const VideoTensor& f, const P& p, Var (*fn)(Tape&, Var, const P&)) {
  Tape tape;
  return tape.value(fn(tape, tape.leaf(f, false), p));
}

void suppress_layer(ConvLayer& l, real bias) {
  std::fill(l.weight.value.begin(), l.weight.value.end(), real(0));
  std::fill(l.bias.value.begin(), l.bias.value.end(), bias);
}

}  // namespace

PmmParams PmmParams::create(std::size_t channels, std::size_t reduction, Rng& rng, const std::string& prefix) {
  check_reducible(channels, reduction, "PMM");
  const std::size_t cr = channels / reduction;
  PmmParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.reduce = ConvLayer::create(prefix + ".reduce", ConvGeometry::same(channels, cr, {1, 1, 1}), true, rng);
  p.temporal = ConvLayer::create(prefix + ".temporal", ConvGeometry::same(2 * cr, cr, {3, 1, 1}), true, rng);
  p.expand = ConvLayer::create(prefix + ".expand", ConvGeometry::same(cr, channels, {1, 1, 1}), true, rng);
  return p;
}

std::vector<Param*> PmmParams::params() {
  return {&reduce.weight, &reduce.bias, &temporal.weight, &temporal.bias, &expand.weight, &expand.bias};
}

std::size_t PmmParams::scalar_count() const {
  return conv_scalars(reduce) + conv_scalars(temporal) + conv_scalars(expand);
}

LmmParams LmmParams::create(Rng& rng, const std::string& prefix) {
  LmmParams p;
  p.conv = ConvLayer::create(prefix + ".conv", ConvGeometry::same(2, 1, {3, 3, 3}), true, rng);
  return p;
}

std::vector<Param*> LmmParams::params() { return {&conv.weight, &conv.bias}; }

std::size_t LmmParams::scalar_count() const { return conv_scalars(conv); }

GmmParams GmmParams::create(std::size_t channels, std::size_t reduction, Rng& rng, const std::string& prefix) {
  check_reducible(channels, reduction, "GMM");
  const std::size_t cr = channels / reduction;
  GmmParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.reduce = ConvLayer::create(prefix + ".reduce", ConvGeometry::same(channels, cr, {1, 1, 1}), true, rng);
  p.temporal = ConvLayer::create(prefix + ".temporal", ConvGeometry::same(2 * cr, cr, {3, 1, 1}), true, rng);
  p.expand = ConvLayer::create(prefix + ".expand", ConvGeometry::same(cr, channels, {1, 1, 1}), true, rng);
  return p;
}

std::vector<Param*> GmmParams::params() {
  return {&reduce.weight, &reduce.bias, &temporal.weight, &temporal.bias, &expand.weight, &expand.bias};
}

std::size_t GmmParams::scalar_count() const {
  return conv_scalars(reduce) + conv_scalars(temporal) + conv_scalars(expand);
}

void GscmConfig::validate() const {
  if (channels == 0 || channels % 4 != 0) {
    throw ShapeError("GSCM: channels " + std::to_string(channels) + " not divisible by 4");
  }
  check_reducible(channels / 4, reduction, "GSCM");
}

GscmParams GscmParams::create(const GscmConfig& config, Rng& rng, const std::string& prefix) {
  config.validate();
  const std::size_t cg = config.group_channels();
  GscmParams p;
  p.config = config;
  if (config.pmm) p.pmm = PmmParams::create(cg, config.reduction, rng, prefix + ".pmm");
  if (config.lmm) p.lmm = LmmParams::create(rng, prefix + ".lmm");
  if (config.gmm) p.gmm = GmmParams::create(cg, config.reduction, rng, prefix + ".gmm");
  return p;
}

std::vector<Param*> GscmParams::params() {
  std::vector<Param*> out;
  auto append = [&out](std::vector<Param*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  if (pmm) append(pmm->params());
  if (lmm) append(lmm->params());
  if (gmm) append(gmm->params());
  return out;
}

std::size_t GscmParams::scalar_count() const {
  return (pmm ? pmm->scalar_count() : 0) + (lmm ? lmm->scalar_count() : 0) + (gmm ? gmm->scalar_count() : 0);
}

Var pmm_attention(Tape& tape, Var f, const PmmParams& p) {
  check_channels(tape, f, p.channels, "PMM");
  return tape.sigmoid(motion_logits(tape, f, p.reduce, p.temporal, p.expand));
}

Var lmm_attention(Tape& tape, Var f, const LmmParams& p) {
  return tape.sigmoid(tape.conv3d(tape.channel_pool(f), p.conv));
}

Var gmm_attention(Tape& tape, Var f, const GmmParams& p) {
  check_channels(tape, f, p.channels, "GMM");
  return tape.sigmoid(motion_logits(tape, tape.spatial_pool(f), p.reduce, p.temporal, p.expand));
}

Var pmm_forward(Tape& tape, Var f, const PmmParams& p) {
  return tape.add(tape.hadamard(f, pmm_attention(tape, f, p)), f);
}

Var lmm_forward(Tape& tape, Var f, const LmmParams& p) {
  return tape.add(tape.hadamard(f, lmm_attention(tape, f, p)), f);
}

Var gmm_forward(Tape& tape, Var f, const GmmParams& p) {
  return tape.add(tape.hadamard(f, gmm_attention(tape, f, p)), f);
}

Var gscm_forward(Tape& tape, Var f, const GscmParams& p) {
  const std::size_t c = tape.value(f).dims().c;
  if (c != p.config.channels) {
    throw ShapeError("GSCM: input has " + std::to_string(c) + " channels, module expects " +
                     std::to_string(p.config.channels));
  }
  if (c % 4 != 0) throw ShapeError("GSCM: channels not divisible by 4");
  const std::size_t cg = c / 4;
  std::array<Var, 4> groups;
  for (std::size_t k = 0; k < 4; ++k) groups[k] = tape.slice(f, k * cg, (k + 1) * cg);
  if (p.pmm) groups[1] = pmm_forward(tape, groups[1], *p.pmm);
  if (p.lmm) groups[2] = lmm_forward(tape, groups[2], *p.lmm);
  if (p.gmm) groups[3] = gmm_forward(tape, groups[3], *p.gmm);
  return tape.concat(groups);
}

VideoTensor pmm_forward(const VideoTensor& f, const PmmParams& p) {
  return run_pure<PmmParams>(f, p, &pmm_forward);
}
VideoTensor lmm_forward(const VideoTensor& f, const LmmParams& p) {
  return run_pure<LmmParams>(f, p, &lmm_forward);
}
VideoTensor gmm_forward(const VideoTensor& f, const GmmParams& p) {
  return run_pure<GmmParams>(f, p, &gmm_forward);
}
VideoTensor gscm_forward(const VideoTensor& f, const GscmParams& p) {
  return run_pure<GscmParams>(f, p, &gscm_forward);
}

GscmCount gscm_param_count(std::size_t channels, std::size_t reduction) {
  GscmConfig{channels, reduction}.validate();
  const std::size_t cg = channels / 4, cr = cg / reduction;
  // reduce (cg -> cr), temporal k=3 (2cr -> cr), expand (cr -> cg), all with bias
  const std::size_t motion = (cg * cr + cr) + (3 * 2 * cr * cr + cr) + (cr * cg + cg);
  const std::size_t local = 27 * 2 + 1;
  return GscmCount{motion, local, motion};
}

void suppress_attention(PmmParams& p, real bias) { suppress_layer(p.expand, bias); }
void suppress_attention(LmmParams& p, real bias) { suppress_layer(p.conv, bias); }
void suppress_attention(GmmParams& p, real bias) { suppress_layer(p.expand, bias); }

void suppress_attention(GscmParams& p, real bias) {
  if (p.pmm) suppress_attention(*p.pmm, bias);
  if (p.lmm) suppress_attention(*p.lmm, bias);
  if (p.gmm) suppress_attention(*p.gmm, bias);
}

}  // namespace can
