#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "can/tensor.hpp"

namespace can {

// out(t) = x(t+1) - x(t) for t < T-1; the last frame is zero so T is preserved.
VideoTensor temporal_diff(const VideoTensor& x);
VideoTensor temporal_diff_backward(const VideoTensor& grad_out);

// Per-site channel reduction to two channels: 0 = mean, 1 = max.
VideoTensor channel_pool(const VideoTensor& x);
// The max adjoint goes to the first channel attaining the maximum.
VideoTensor channel_pool_backward(const VideoTensor& x, const VideoTensor& grad_out);

// Mean over H and W, giving (N, T, 1, 1, C).
VideoTensor spatial_pool(const VideoTensor& x);
VideoTensor spatial_pool_backward(const VideoTensor& grad_out, const Dims& input_dims);

// Mean over T, H and W, giving (N, 1, 1, 1, C).
VideoTensor global_avg_pool(const VideoTensor& x);
VideoTensor global_avg_pool_backward(const VideoTensor& grad_out, const Dims& input_dims);

// Spatial (H, W) max pooling with square window; T and C are untouched.
VideoTensor max_pool_spatial(const VideoTensor& x, std::size_t window, std::size_t stride, std::size_t pad);
VideoTensor max_pool_spatial_backward(const VideoTensor& x, const VideoTensor& grad_out, std::size_t window,
                                      std::size_t stride, std::size_t pad);

VideoTensor concat_channels(std::span<const VideoTensor> xs);
VideoTensor slice_channels(const VideoTensor& x, std::size_t begin, std::size_t end);
std::vector<VideoTensor> split_channels(const VideoTensor& x, std::size_t parts = 4);

real sigmoid(real v) noexcept;
VideoTensor sigmoid(const VideoTensor& x);
// Given y = sigmoid(x), returns grad_out * y * (1 - y).
VideoTensor sigmoid_backward(const VideoTensor& y, const VideoTensor& grad_out);

VideoTensor relu(const VideoTensor& x);
VideoTensor relu_backward(const VideoTensor& x, const VideoTensor& grad_out);

std::vector<real> softmax(std::span<const real> logits);

// `b` may equal `a` in shape, or broadcast with H = W = 1 (over space) and/or C = 1 (over channels).
bool broadcastable(const Dims& a, const Dims& b) noexcept;
// Sum-reduces a full-size gradient down to the broadcast operand's shape.
VideoTensor reduce_to(const VideoTensor& grad, const Dims& target);

VideoTensor hadamard(const VideoTensor& a, const VideoTensor& b);
VideoTensor add(const VideoTensor& a, const VideoTensor& b);
VideoTensor scale(const VideoTensor& a, real s);

// y(..., c) = x(..., c) * gain[c] + shift[c].
VideoTensor channel_affine(const VideoTensor& x, std::span<const real> gain, std::span<const real> shift);

// x: (N, 1, 1, 1, in), weight row-major (out, in) -> (N, 1, 1, 1, out).
VideoTensor linear(const VideoTensor& x, std::span<const real> weight, std::span<const real> bias,
                   std::size_t out_features);

struct CrossEntropy {
  real loss = 0;          // mean over the batch
  VideoTensor grad;       // d loss / d logits
};

// logits: (N, 1, 1, 1, K); labels: N class ids.
CrossEntropy softmax_cross_entropy(const VideoTensor& logits, std::span<const std::size_t> labels);

}  // namespace can
