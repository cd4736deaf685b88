#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "can/tensor.hpp"

namespace can {

// Per-axis integer triple in (time, height, width) order.
struct Extent3 {
  std::size_t t = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t volume() const noexcept { return t * h * w; }
  bool operator==(const Extent3&) const = default;
};

// Shape of a grouped, dilated, strided, zero-padded 3-D convolution.
// Weights are laid out (out_channels, in_channels / groups, kT, kH, kW).
struct ConvGeometry {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t groups = 1;
  Extent3 kernel;
  Extent3 stride;
  Extent3 dilation;
  Extent3 padding{0, 0, 0};

  std::size_t in_per_group() const noexcept { return in_channels / groups; }
  std::size_t out_per_group() const noexcept { return out_channels / groups; }
  std::size_t weight_count() const noexcept { return out_channels * in_per_group() * kernel.volume(); }
  bool depthwise() const noexcept { return groups == in_channels && groups == out_channels; }

  // Throws ShapeError on a zero extent or indivisible group split.
  void validate() const;
  // Output extents for an input of `in`; throws ShapeError if any would be < 1.
  Dims output_dims(const Dims& in) const;

  // Stride-1 convolution padded so T, H, W are preserved ("same" padding).
  static ConvGeometry same(std::size_t in, std::size_t out, Extent3 kernel, Extent3 dilation = {1, 1, 1},
                           std::size_t groups = 1);
};

// A convolution with its weights. An empty `bias` means no bias term.
struct ConvKernel {
  ConvGeometry geometry;
  std::vector<real> weights;
  std::vector<real> bias;
};

VideoTensor conv3d(const VideoTensor& x, const ConvGeometry& geometry, std::span<const real> weights,
                   std::span<const real> bias);
VideoTensor conv3d(const VideoTensor& x, const ConvKernel& kernel);

// Literal nested-loop reference with the same contract as conv3d.
VideoTensor conv3d_oracle(const VideoTensor& x, const ConvKernel& kernel);

// Adjoint of conv3d with respect to its input.
VideoTensor conv3d_backward_input(const VideoTensor& grad_out, const Dims& input_dims,
                                  const ConvGeometry& geometry, std::span<const real> weights);

// Accumulates (+=) weight and bias gradients. `grad_bias` may be empty.
void conv3d_backward_params(const VideoTensor& x, const VideoTensor& grad_out, const ConvGeometry& geometry,
                            std::span<real> grad_weights, std::span<real> grad_bias);

}  // namespace can
