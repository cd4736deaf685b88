#pragma once

#include <cstddef>
#include <deque>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "can/conv.hpp"
#include "can/tensor.hpp"

namespace can {

using Rng = std::mt19937_64;

// A named learnable bundle with its paired gradient buffer.
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<real> value;
  std::vector<real> grad;

  Param() = default;
  Param(std::string name, std::vector<std::size_t> shape, real fill = real(0));

  std::size_t size() const noexcept { return value.size(); }
  void zero_grad();
};

void init_normal(Param& p, real stddev, Rng& rng);

// A convolution whose weights (and optional bias) are learnable.
struct ConvLayer {
  ConvGeometry geometry;
  Param weight;
  Param bias;  // size 0 when the layer has no bias

  bool has_bias() const noexcept { return bias.size() != 0; }
  ConvKernel kernel() const;

  // He-normal weights (std = sqrt(2 / fan_in)), zero bias.
  static ConvLayer create(const std::string& name, const ConvGeometry& geometry, bool with_bias, Rng& rng);
};

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Records primitive ops during a forward pass and replays their adjoints in reverse.
// Parameter gradients are accumulated in tape-local buffers; call
// accumulate_param_grads() to add them into the Param::grad buffers.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(VideoTensor value, bool requires_grad = true);

  const VideoTensor& value(Var v) const { return nodes_.at(v.id).value; }
  // Gradient of the seeded output w.r.t. `v`; zeros if `v` was not reached.
  VideoTensor grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var conv3d(Var x, const ConvLayer& layer);
  Var temporal_diff(Var x);
  Var channel_pool(Var x);
  Var spatial_pool(Var x);
  Var global_avg_pool(Var x);
  Var max_pool_spatial(Var x, std::size_t window, std::size_t stride, std::size_t pad);
  Var concat(std::span<const Var> xs);
  Var slice(Var x, std::size_t begin, std::size_t end);
  Var sigmoid(Var x);
  Var relu(Var x);
  Var hadamard(Var a, Var b);
  Var add(Var a, Var b);
  Var scale(Var x, real s);
  Var channel_affine(Var x, const Param& gain, const Param& shift);
  Var linear(Var x, const Param& weight, const Param& bias);
  // sum_i softmax(logits)_i * xs[i]; the logits receive gradients through the softmax Jacobian.
  Var softmax_weighted_sum(std::span<const Var> xs, const Param& logits);
  // Mean softmax cross-entropy of (N,1,1,1,K) logits as a (1,1,1,1,1) scalar.
  Var cross_entropy(Var logits, std::span<const std::size_t> labels);

  // Reverse pass seeded with d loss / d out. A second call without zero_grad() is a StateError.
  void backward(Var out, const VideoTensor& seed);
  // Clears all gradients so backward() may run again.
  void zero_grad();

  // Hash of every branch taken by a non-smooth op: relu signs, channel-max and
  // max-pool selections. Two evaluations with equal signatures ran the same smooth piece.
  std::uint64_t kink_signature() const;

  // Tape-local gradient for `p`, empty if `p` was not touched.
  std::span<const real> param_grad(const Param& p) const;
  void accumulate_param_grads(std::span<Param* const> params) const;

 private:
  struct Node {
    VideoTensor value;
    VideoTensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Var push(VideoTensor value, bool requires_grad, std::function<void()> backward);
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }
  void accumulate(Var v, const VideoTensor& g);
  std::vector<real>& local_grad(const Param& p);

  enum class KinkKind { relu, channel_max, spatial_max };
  struct Kink {
    KinkKind kind;
    Var input;
    std::size_t window = 0, stride = 0, pad = 0;
  };

  std::vector<Node> nodes_;
  std::vector<Kink> kinks_;
  std::deque<std::vector<real>> param_grads_;  // deque: references stay valid as bundles are added
  std::unordered_map<const Param*, std::size_t> param_index_;
  bool backward_done_ = false;
};

// Test hook: scales the adjoint of the named primitive ("sigmoid", "conv3d",
// "temporal_diff", "channel_pool", "spatial_pool", "softmax") so gradient
// checks can be shown to catch a broken backward pass. Empty string clears it.
void set_adjoint_fault(std::string_view op);
std::string_view adjoint_fault();

}  // namespace can
