#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "can/data.hpp"
#include "can/network.hpp"

namespace can {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // applied to every bundle
  std::vector<std::size_t> lr_steps{20, 25};  // epochs (0-based) from which the rate is multiplied by lr_decay
  double lr_decay = 0.1;
  std::uint64_t seed = 7;  // shuffling; parameter init is the caller's choice
  std::size_t threads = 1;  // results are bit-identical for any value

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

struct EvalResult {
  std::size_t count = 0;
  double loss = 0;  // mean cross-entropy
  double top1 = 0;  // fractions in [0, 1]
  double top5 = 0;
  std::vector<std::size_t> predictions;  // argmax per clip, lowest class index on ties
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  double train_loss = 0;
  double train_top1 = 0;  // from the forward passes used for the updates
  double val_top1 = 0;
  double val_top5 = 0;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;  // 1-based; 0 if no epoch ran
  double best_val_top1 = -1;
  NetParams best;  // weights at best_epoch (first epoch reaching the maximum)
};

// Called after every epoch with the current weights; `improved` is set when val top-1
// strictly beat every earlier epoch.
using EpochHook = std::function<void(const EpochMetrics&, const NetParams& current, bool improved)>;

// Mini-batch SGD with momentum and softmax cross-entropy. `p` ends at the last-epoch weights.
// Throws NumericError naming the step if a loss turns non-finite, ConfigError if the data
// does not fit the network.
TrainResult train(NetParams& p, const Dataset& data, const Split& split, const TrainConfig& config,
                  const EpochHook& hook = {});

EvalResult evaluate(const NetParams& p, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t threads = 1);

// Runs calibrate_norms on the first `clips` of `indices` stacked into one batch.
void calibrate_on(NetParams& p, const Dataset& data, std::span<const std::size_t> indices, std::size_t clips,
                  real residual_scale = real(0.3));

// Rank of `label` counting strictly larger logits, plus equal ones at lower class indices.
std::size_t label_rank(std::span<const real> logits, std::size_t label);

// Throws ConfigError when the clips or class count do not match the network input.
void check_compatible(const NetParams& p, const Dataset& data);

}  // namespace can
