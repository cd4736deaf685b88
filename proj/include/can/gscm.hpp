#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "can/autograd.hpp"

namespace can {

// Pointwise motion path on a C_g-channel group:
//   reduce 1x1x1 (C_g -> C_g/r), concat with its temporal difference,
//   temporal 3x1x1 (2 C_g/r -> C_g/r), expand 1x1x1 (C_g/r -> C_g), sigmoid.
struct PmmParams {
  std::size_t channels = 0;
  std::size_t reduction = 2;
  ConvLayer reduce;
  ConvLayer temporal;
  ConvLayer expand;

  static PmmParams create(std::size_t channels, std::size_t reduction, Rng& rng, const std::string& prefix = "pmm");
  std::vector<Param*> params();
  std::size_t scalar_count() const;
};

// Local motion path: channel mean/max pool -> 3x3x3 conv (2 -> 1) -> sigmoid, shared across channels.
struct LmmParams {
  ConvLayer conv;

  static LmmParams create(Rng& rng, const std::string& prefix = "lmm");
  std::vector<Param*> params();
  std::size_t scalar_count() const;
};

// Global motion path on the spatially averaged (N, T, 1, 1, C_g) descriptor:
//   reduce k=1 (C_g -> C_g/r), concat with temporal difference, temporal k=3
//   (2 C_g/r -> C_g/r), expand k=1 (C_g/r -> C_g), sigmoid, broadcast over H, W.
struct GmmParams {
  std::size_t channels = 0;
  std::size_t reduction = 2;
  ConvLayer reduce;
  ConvLayer temporal;
  ConvLayer expand;

  static GmmParams create(std::size_t channels, std::size_t reduction, Rng& rng, const std::string& prefix = "gmm");
  std::vector<Param*> params();
  std::size_t scalar_count() const;
};

struct GscmConfig {
  std::size_t channels = 64;
  std::size_t reduction = 2;
  bool pmm = true;
  bool lmm = true;
  bool gmm = true;

  void validate() const;
  std::size_t group_channels() const noexcept { return channels / 4; }
};

// Group spatial cue module. A disabled path passes its group through unchanged.
struct GscmParams {
  GscmConfig config;
  std::optional<PmmParams> pmm;
  std::optional<LmmParams> lmm;
  std::optional<GmmParams> gmm;

  static GscmParams create(const GscmConfig& config, Rng& rng, const std::string& prefix = "gscm");
  std::vector<Param*> params();
  std::size_t scalar_count() const;
};

// Attention maps (after the sigmoid). Shapes: PMM (N,T,H,W,C_g), LMM (N,T,H,W,1), GMM (N,T,1,1,C_g).
Var pmm_attention(Tape& tape, Var f, const PmmParams& p);
Var lmm_attention(Tape& tape, Var f, const LmmParams& p);
Var gmm_attention(Tape& tape, Var f, const GmmParams& p);

Var pmm_forward(Tape& tape, Var f, const PmmParams& p);
Var lmm_forward(Tape& tape, Var f, const LmmParams& p);
Var gmm_forward(Tape& tape, Var f, const GmmParams& p);
Var gscm_forward(Tape& tape, Var f, const GscmParams& p);

VideoTensor pmm_forward(const VideoTensor& f, const PmmParams& p);
VideoTensor lmm_forward(const VideoTensor& f, const LmmParams& p);
VideoTensor gmm_forward(const VideoTensor& f, const GmmParams& p);
VideoTensor gscm_forward(const VideoTensor& f, const GscmParams& p);

struct GscmCount {
  std::size_t pmm = 0;
  std::size_t lmm = 0;
  std::size_t gmm = 0;
  std::size_t total() const noexcept { return pmm + lmm + gmm; }
};

// Exact learnable scalar counts per path for one insertion site of width `channels`.
GscmCount gscm_param_count(std::size_t channels, std::size_t reduction);

// Zero each path's final pre-sigmoid weights and set its bias so attention ~ sigmoid(bias).
void suppress_attention(PmmParams& p, real bias = real(-30));
void suppress_attention(LmmParams& p, real bias = real(-30));
void suppress_attention(GmmParams& p, real bias = real(-30));
void suppress_attention(GscmParams& p, real bias = real(-30));

}  // namespace can
