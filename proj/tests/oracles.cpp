#include "oracles.hpp"

#include <algorithm>
#include <cmath>

namespace can::oracle {

VideoTensor random_tensor(const Dims& d, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  VideoTensor x(d);
  for (real& v : x.data()) v = real(u(rng));
  return x;
}

ConvKernel random_kernel(const ConvGeometry& g, std::mt19937_64& rng, bool with_bias) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ConvKernel k{g, std::vector<real>(g.weight_count()), {}};
  for (real& v : k.weights) v = real(u(rng));
  if (with_bias) {
    k.bias.resize(g.out_channels);
    for (real& v : k.bias) v = real(u(rng));
  }
  return k;
}

VideoTensor temporal_diff(const VideoTensor& x) {
  const Dims d = x.dims();
  VideoTensor out(d);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w)
          for (std::size_t c = 0; c < d.c; ++c)
            out(n, t, h, w, c) = t + 1 < d.t ? x(n, t + 1, h, w, c) - x(n, t, h, w, c) : real(0);
  return out;
}

VideoTensor channel_pool(const VideoTensor& x) {
  const Dims d = x.dims();
  VideoTensor out(Dims{d.n, d.t, d.h, d.w, 2});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w) {
          real sum = 0, mx = x(n, t, h, w, 0);
          for (std::size_t c = 0; c < d.c; ++c) {
            sum += x(n, t, h, w, c);
            if (x(n, t, h, w, c) > mx) mx = x(n, t, h, w, c);
          }
          out(n, t, h, w, 0) = sum / real(d.c);
          out(n, t, h, w, 1) = mx;
        }
  return out;
}

VideoTensor spatial_pool(const VideoTensor& x) {
  const Dims d = x.dims();
  VideoTensor out(Dims{d.n, d.t, 1, 1, d.c});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t c = 0; c < d.c; ++c) {
        real sum = 0;
        for (std::size_t h = 0; h < d.h; ++h)
          for (std::size_t w = 0; w < d.w; ++w) sum += x(n, t, h, w, c);
        out(n, t, 0, 0, c) = sum / real(d.h * d.w);
      }
  return out;
}

VideoTensor sigmoid(const VideoTensor& x) {
  VideoTensor out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = real(1) / (real(1) + std::exp(-x.data()[i]));
  return out;
}

VideoTensor recalibrate(const VideoTensor& x, const VideoTensor& a) {
  const Dims d = x.dims(), ad = a.dims();
  VideoTensor out(d);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w)
          for (std::size_t c = 0; c < d.c; ++c) {
            const real att = a(n, t, ad.h == 1 ? 0 : h, ad.w == 1 ? 0 : w, ad.c == 1 ? 0 : c);
            out(n, t, h, w, c) = att * x(n, t, h, w, c) + x(n, t, h, w, c);
          }
  return out;
}

VideoTensor concat(const VideoTensor& a, const VideoTensor& b) {
  const Dims d = a.dims();
  VideoTensor out(Dims{d.n, d.t, d.h, d.w, d.c + b.dims().c});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w) {
          for (std::size_t c = 0; c < d.c; ++c) out(n, t, h, w, c) = a(n, t, h, w, c);
          for (std::size_t c = 0; c < b.dims().c; ++c) out(n, t, h, w, d.c + c) = b(n, t, h, w, c);
        }
  return out;
}

namespace {

VideoTensor slice(const VideoTensor& x, std::size_t begin, std::size_t width) {
  const Dims d = x.dims();
  VideoTensor out(Dims{d.n, d.t, d.h, d.w, width});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w)
          for (std::size_t c = 0; c < width; ++c) out(n, t, h, w, c) = x(n, t, h, w, begin + c);
  return out;
}

VideoTensor motion(const VideoTensor& x, const ConvLayer& reduce, const ConvLayer& temporal,
                   const ConvLayer& expand) {
  const VideoTensor r = conv3d_oracle(x, reduce.kernel());
  const VideoTensor c = concat(r, temporal_diff(r));
  return sigmoid(conv3d_oracle(conv3d_oracle(c, temporal.kernel()), expand.kernel()));
}

}  // namespace

VideoTensor mtcm(const VideoTensor& g, const MtcmParams& p) {
  const VideoTensor r = conv3d_oracle(g, p.reduce.kernel());
  // softmax written out directly
  std::vector<real> w(p.alpha.value.size());
  real mx = p.alpha.value[0];
  for (real a : p.alpha.value) mx = std::max(mx, a);
  real total = 0;
  for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = std::exp(p.alpha.value[i] - mx));
  for (real& v : w) v /= total;

  VideoTensor fused(r.dims());
  for (std::size_t i = 0; i < p.branches.size(); ++i) {
    const VideoTensor b = conv3d_oracle(r, p.branches[i].kernel());
    for (std::size_t k = 0; k < fused.size(); ++k) fused.data()[k] += w[i] * b.data()[k];
  }
  const VideoTensor attention = sigmoid(conv3d_oracle(fused, p.expand.kernel()));
  return recalibrate(g, attention);
}

VideoTensor pmm(const VideoTensor& f, const PmmParams& p) {
  return recalibrate(f, motion(f, p.reduce, p.temporal, p.expand));
}

VideoTensor lmm(const VideoTensor& f, const LmmParams& p) {
  return recalibrate(f, sigmoid(conv3d_oracle(channel_pool(f), p.conv.kernel())));
}

VideoTensor gmm(const VideoTensor& f, const GmmParams& p) {
  return recalibrate(f, motion(spatial_pool(f), p.reduce, p.temporal, p.expand));
}

VideoTensor gscm(const VideoTensor& f, const GscmParams& p) {
  const std::size_t cg = f.dims().c / 4;
  VideoTensor g1 = slice(f, 0, cg), g2 = slice(f, cg, cg), g3 = slice(f, 2 * cg, cg), g4 = slice(f, 3 * cg, cg);
  if (p.pmm) g2 = pmm(g2, *p.pmm);
  if (p.lmm) g3 = lmm(g3, *p.lmm);
  if (p.gmm) g4 = gmm(g4, *p.gmm);
  return concat(concat(g1, g2), concat(g3, g4));
}

}  // namespace can::oracle
