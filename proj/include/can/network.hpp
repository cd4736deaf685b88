#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "can/autograd.hpp"
#include "can/gscm.hpp"
#include "can/mtcm.hpp"

namespace can {

struct StemSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 16;
  std::size_t kernel = 3;  // square spatial kernel, applied per frame
  std::size_t stride = 1;
  bool max_pool = false;   // 3x3 stride-2 spatial max pool after the stem
};

// Which attention modules a block gets when insert_can is set.
struct CanSpec {
  bool pmm = true;
  bool lmm = true;
  bool gmm = true;
  bool mtcm = true;
  std::size_t branches = 3;
  std::size_t reduction = 2;

  bool gscm() const noexcept { return pmm || lmm || gmm; }
  bool any() const noexcept { return gscm() || mtcm; }
};

// Residual bottleneck: 1x1 reduce -> 3x3 spatial (carries the stride) -> [GSCM -> MTCM] -> 1x1 expand,
// added to the (projected when shapes differ) input. Convolutions are per frame (kT = 1).
struct BlockSpec {
  std::size_t in_channels = 0;
  std::size_t bottleneck_channels = 0;
  std::size_t out_channels = 0;
  std::size_t spatial_stride = 1;
  bool insert_can = false;

  bool projects() const noexcept { return in_channels != out_channels || spatial_stride != 1; }
};

struct NetSpec {
  std::string name;
  StemSpec stem;
  std::vector<std::vector<BlockSpec>> stages;
  CanSpec can;
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 5;

  Dims input_dims(std::size_t batch = 1) const { return Dims{batch, frames, height, width, stem.in_channels}; }
  // One line per field; identical specs give identical text.
  std::string canonical() const;
  // FNV-1a 64 of canonical().
  std::uint64_t hash() const;
  // Throws ConfigError on inconsistent widths or CAN channel counts not divisible by 4r.
  void validate() const;
};

std::vector<std::string> spec_names();
// Named instances: tinycan, tinycan-baseline, resnet50 (alias baseline), resnet50can,
// resnet50-mtcm, resnet50-gscm, resnet50-pmm, resnet50-lmm, resnet50-gmm.
// `frames` overrides T when non-zero. Throws ConfigError for an unknown name.
NetSpec named_spec(const std::string& name, std::size_t frames = 0);

// Per-channel learnable scale and shift standing in for batch normalization.
struct Affine {
  Param gain;
  Param shift;

  static Affine create(const std::string& name, std::size_t channels);
};

struct BlockParams {
  BlockSpec spec;
  ConvLayer reduce;
  Affine reduce_norm;
  ConvLayer spatial;
  Affine spatial_norm;
  std::optional<GscmParams> gscm;
  std::optional<MtcmParams> mtcm;
  ConvLayer expand;
  Affine expand_norm;
  std::optional<ConvLayer> shortcut;
  std::optional<Affine> shortcut_norm;
};

struct NetParams {
  NetSpec spec;
  ConvLayer stem;
  Affine stem_norm;
  std::vector<BlockParams> blocks;
  Param fc_weight;
  Param fc_bias;

  static NetParams create(const NetSpec& spec, std::uint64_t seed);

  // Every learnable bundle in a fixed order (the checkpoint order).
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  std::size_t scalar_count() const;
  void zero_grad();
};

// One residual block; exposed so a single block can be gradient-checked.
Var block_forward(Tape& tape, Var x, const BlockParams& q);

// x: (N, T, H, W, C_in) -> logits (N, 1, 1, 1, K). Batch rows never interact.
Var net_forward(Tape& tape, Var x, const NetParams& p);
VideoTensor net_forward(const NetParams& p, const VideoTensor& x);

// Data-dependent initialisation over a batch of clips: each affine is set, in forward
// order, so its output has zero mean and unit spread per channel; the last affine of each
// residual branch gets spread `residual_scale` instead.
void calibrate_norms(NetParams& p, const VideoTensor& batch, real residual_scale = real(0.3));

// Drives every attention map in the network to ~sigmoid(bias).
void suppress_attention(NetParams& p, real bias = real(-30));

// Copies values of bundles whose names and sizes match; returns how many bundles were copied.
std::size_t copy_matching_params(const NetParams& from, NetParams& to);

struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

// Multiply-accumulates of convolutions and the classifier for one clip; elementwise ops,
// pooling and the affine layers count parameters but no MACs.
struct CostReport {
  std::vector<LayerCost> layers;

  std::uint64_t params() const;
  std::uint64_t macs() const;
};

// Analytic: derived from layer shapes alone, nothing is allocated.
CostReport count_cost(const NetSpec& spec);

// Checkpoint: "CANC", version, spec hash, then (name, dims, f64 values) per bundle.
void save_checkpoint(const std::string& path, const NetParams& p);
// Loads into `p`, whose spec must hash to the stored value.
void load_checkpoint(const std::string& path, NetParams& p);

}  // namespace can
