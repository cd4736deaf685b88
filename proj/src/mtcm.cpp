#include "can/mtcm.hpp"

#include <algorithm>
#include <string>

namespace can {

void MtcmConfig::validate() const {
  if (branches == 0) throw ShapeError("MTCM: branch count must be >= 1");
  if (reduction == 0 || channels == 0 || channels % reduction != 0) {
    throw ShapeError("MTCM: channels " + std::to_string(channels) + " not divisible by r=" +
                     std::to_string(reduction));
  }
}

MtcmParams MtcmParams::create(const MtcmConfig& config, Rng& rng, const std::string& prefix) {
  config.validate();
  const std::size_t c = config.channels, cr = config.reduced();
  MtcmParams p;
  p.config = config;
  p.reduce = ConvLayer::create(prefix + ".reduce", ConvGeometry::same(c, cr, {1, 1, 1}), true, rng);
  for (std::size_t i = 1; i <= config.branches; ++i) {
    const ConvGeometry g = ConvGeometry::same(cr, cr, {3, 1, 1}, {i, 1, 1}, cr);
    p.branches.push_back(ConvLayer::create(prefix + ".branch" + std::to_string(i), g, false, rng));
  }
  p.alpha = Param(prefix + ".alpha", {config.branches}, real(1) / real(config.branches));
  p.expand = ConvLayer::create(prefix + ".expand", ConvGeometry::same(cr, c, {1, 1, 1}), true, rng);
  return p;
}

std::vector<Param*> MtcmParams::params() {
  std::vector<Param*> out{&reduce.weight, &reduce.bias};
  for (auto& b : branches) out.push_back(&b.weight);
  out.push_back(&alpha);
  out.push_back(&expand.weight);
  out.push_back(&expand.bias);
  return out;
}

std::size_t MtcmParams::scalar_count() const {
  std::size_t n = reduce.weight.size() + reduce.bias.size() + alpha.size() + expand.weight.size() + expand.bias.size();
  for (const auto& b : branches) n += b.weight.size() + b.bias.size();
  return n;
}

Var mtcm_attention_logits(Tape& tape, Var g, const MtcmParams& p) {
  if (tape.value(g).dims().c != p.config.channels) {
    throw ShapeError("MTCM: input has " + std::to_string(tape.value(g).dims().c) + " channels, module expects " +
                     std::to_string(p.config.channels));
  }
  const Var reduced = tape.conv3d(g, p.reduce);
  std::vector<Var> branch_out;
  branch_out.reserve(p.branches.size());
  for (const auto& b : p.branches) branch_out.push_back(tape.conv3d(reduced, b));
  const Var fused = tape.softmax_weighted_sum(branch_out, p.alpha);
  return tape.conv3d(fused, p.expand);
}

Var mtcm_forward(Tape& tape, Var g, const MtcmParams& p) {
  const Var attention = tape.sigmoid(mtcm_attention_logits(tape, g, p));
  return tape.add(tape.hadamard(attention, g), g);
}

VideoTensor mtcm_forward(const VideoTensor& g, const MtcmParams& p) {
  Tape tape;
  return tape.value(mtcm_forward(tape, tape.leaf(g, false), p));
}

std::size_t mtcm_param_count(std::size_t channels, std::size_t branches, std::size_t reduction) {
  MtcmConfig{channels, branches, reduction}.validate();
  const std::size_t cr = channels / reduction;
  const std::size_t reduce = channels * cr + cr;
  const std::size_t depthwise = branches * 3 * cr;
  const std::size_t expand = cr * channels + channels;
  return reduce + depthwise + branches + expand;
}

void suppress_attention(MtcmParams& p, real bias) {
  std::fill(p.expand.weight.value.begin(), p.expand.weight.value.end(), real(0));
  std::fill(p.expand.bias.value.begin(), p.expand.bias.value.end(), bias);
}

}  // namespace can
