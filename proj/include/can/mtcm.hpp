#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "can/autograd.hpp"

namespace can {

struct MtcmConfig {
  std::size_t channels = 64;
  std::size_t branches = 3;   // N: branch i (1-based) uses temporal dilation i
  std::size_t reduction = 2;  // r

  void validate() const;
  std::size_t reduced() const noexcept { return channels / reduction; }
};

// Multi-scale temporal cue module parameters.
//   reduce:   1x1x1 conv C -> C/r (bias)
//   branches: depthwise kT=3 temporal convs on C/r channels, dilation 1..N (no bias)
//   alpha:    N branch logits, fused through softmax
//   expand:   1x1x1 conv C/r -> C (bias)
struct MtcmParams {
  MtcmConfig config;
  ConvLayer reduce;
  std::vector<ConvLayer> branches;
  Param alpha;
  ConvLayer expand;

  static MtcmParams create(const MtcmConfig& config, Rng& rng, const std::string& prefix = "mtcm");

  std::vector<Param*> params();
  std::size_t scalar_count() const;
};

// Pre-sigmoid attention logits expand(sum_i softmax(alpha)_i * branch_i(reduce(g))).
Var mtcm_attention_logits(Tape& tape, Var g, const MtcmParams& p);
// sigmoid(logits) * g + g.
Var mtcm_forward(Tape& tape, Var g, const MtcmParams& p);
VideoTensor mtcm_forward(const VideoTensor& g, const MtcmParams& p);

// Exact learnable scalar count for one insertion site.
std::size_t mtcm_param_count(std::size_t channels, std::size_t branches, std::size_t reduction);

// Zero the expand weights and set its bias to `bias` so the attention map is ~sigmoid(bias).
void suppress_attention(MtcmParams& p, real bias = real(-30));

}  // namespace can
