#pragma once

// Straight-line reference implementations used only by tests. They are built
// from conv3d_oracle and hand-written loops, never from the optimized kernels
// or the tape, so they stay independent of the code paths they check.

#include <random>

#include "can/conv.hpp"
#include "can/gscm.hpp"
#include "can/mtcm.hpp"
#include "can/tensor.hpp"

namespace can::oracle {

VideoTensor random_tensor(const Dims& d, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);
ConvKernel random_kernel(const ConvGeometry& g, std::mt19937_64& rng, bool with_bias = true);

VideoTensor temporal_diff(const VideoTensor& x);
VideoTensor channel_pool(const VideoTensor& x);
VideoTensor spatial_pool(const VideoTensor& x);
VideoTensor sigmoid(const VideoTensor& x);
// a * sigmoid-attention broadcast + a, with attention broadcast by the stated rule.
VideoTensor recalibrate(const VideoTensor& x, const VideoTensor& attention);
VideoTensor concat(const VideoTensor& a, const VideoTensor& b);

VideoTensor mtcm(const VideoTensor& g, const MtcmParams& p);
VideoTensor pmm(const VideoTensor& f, const PmmParams& p);
VideoTensor lmm(const VideoTensor& f, const LmmParams& p);
VideoTensor gmm(const VideoTensor& f, const GmmParams& p);
VideoTensor gscm(const VideoTensor& f, const GscmParams& p);

}  // namespace can::oracle
