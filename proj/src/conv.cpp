#include "can/conv.hpp"

#include <string>
#include <utility>

namespace can {

namespace {

using index_t = std::ptrdiff_t;

// Input coordinate hit by kernel tap `k` for output coordinate `o`, or -1 when it falls in padding.
inline index_t source_index(std::size_t o, std::size_t k, std::size_t stride, std::size_t dilation,
                            std::size_t pad, std::size_t extent) {
  const index_t i = index_t(o * stride + k * dilation) - index_t(pad);
  return (i < 0 || i >= index_t(extent)) ? -1 : i;
}

std::size_t tap_index(const ConvGeometry& g, std::size_t kt, std::size_t kh, std::size_t kw) {
  return (kt * g.kernel.h + kh) * g.kernel.w + kw;
}

std::size_t weight_index(const ConvGeometry& g, std::size_t o, std::size_t i, std::size_t tap) {
  return (o * g.in_per_group() + i) * g.kernel.volume() + tap;
}

// Weights repacked as [group][tap][in][out]: the out-vector of one (tap, in) pair is contiguous.
std::vector<real> pack_in_out(const ConvGeometry& g, std::span<const real> w) {
  const std::size_t taps = g.kernel.volume(), ipg = g.in_per_group(), opg = g.out_per_group();
  std::vector<real> packed(w.size());
  for (std::size_t grp = 0; grp < g.groups; ++grp)
    for (std::size_t tap = 0; tap < taps; ++tap)
      for (std::size_t i = 0; i < ipg; ++i)
        for (std::size_t o = 0; o < opg; ++o)
          packed[((grp * taps + tap) * ipg + i) * opg + o] = w[weight_index(g, grp * opg + o, i, tap)];
  return packed;
}

// Weights repacked as [group][tap][out][in] for the input adjoint.
std::vector<real> pack_out_in(const ConvGeometry& g, std::span<const real> w) {
  const std::size_t taps = g.kernel.volume(), ipg = g.in_per_group(), opg = g.out_per_group();
  std::vector<real> packed(w.size());
  for (std::size_t grp = 0; grp < g.groups; ++grp)
    for (std::size_t tap = 0; tap < taps; ++tap)
      for (std::size_t o = 0; o < opg; ++o)
        for (std::size_t i = 0; i < ipg; ++i)
          packed[((grp * taps + tap) * opg + o) * ipg + i] = w[weight_index(g, grp * opg + o, i, tap)];
  return packed;
}

// Depthwise weights as [tap][channel].
std::vector<real> pack_depthwise(const ConvGeometry& g, std::span<const real> w) {
  const std::size_t taps = g.kernel.volume(), c = g.out_channels;
  std::vector<real> packed(w.size());
  for (std::size_t tap = 0; tap < taps; ++tap)
    for (std::size_t ch = 0; ch < c; ++ch) packed[tap * c + ch] = w[ch * taps + tap];
  return packed;
}

inline void axpy(real* __restrict y, const real* __restrict x, real a, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) y[k] += a * x[k];
}

inline void fma_into(real* __restrict y, const real* __restrict a, const real* __restrict b, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) y[k] += a[k] * b[k];
}

void check_params(const ConvGeometry& g, std::size_t weights, std::size_t bias) {
  g.validate();
  if (weights != g.weight_count()) {
    throw ShapeError("conv3d: expected " + std::to_string(g.weight_count()) + " weights, got " +
                     std::to_string(weights));
  }
  if (bias != 0 && bias != g.out_channels) {
    throw ShapeError("conv3d: bias length " + std::to_string(bias) + " != out_channels " +
                     std::to_string(g.out_channels));
  }
}

void check_input(const ConvGeometry& g, const Dims& in) {
  if (in.c != g.in_channels) {
    throw ShapeError("conv3d: input has " + std::to_string(in.c) + " channels, kernel expects " +
                     std::to_string(g.in_channels));
  }
}

// Calls visit(out_site, in_site, tap) for every in-bounds (output site, kernel tap) pair, in a fixed order.
template <typename Visit>
void for_each_tap(const ConvGeometry& g, const Dims& in, const Dims& out, Visit&& visit) {
  for (std::size_t n = 0; n < out.n; ++n)
    for (std::size_t to = 0; to < out.t; ++to)
      for (std::size_t ho = 0; ho < out.h; ++ho)
        for (std::size_t wo = 0; wo < out.w; ++wo) {
          const std::size_t out_site = ((n * out.t + to) * out.h + ho) * out.w + wo;
          for (std::size_t kt = 0; kt < g.kernel.t; ++kt) {
            const index_t ti = source_index(to, kt, g.stride.t, g.dilation.t, g.padding.t, in.t);
            if (ti < 0) continue;
            for (std::size_t kh = 0; kh < g.kernel.h; ++kh) {
              const index_t hi = source_index(ho, kh, g.stride.h, g.dilation.h, g.padding.h, in.h);
              if (hi < 0) continue;
              for (std::size_t kw = 0; kw < g.kernel.w; ++kw) {
                const index_t wi = source_index(wo, kw, g.stride.w, g.dilation.w, g.padding.w, in.w);
                if (wi < 0) continue;
                const std::size_t in_site = ((n * in.t + std::size_t(ti)) * in.h + std::size_t(hi)) * in.w +
                                            std::size_t(wi);
                visit(out_site, in_site, tap_index(g, kt, kh, kw));
              }
            }
          }
        }
}


struct TapRef {
  std::size_t site;
  std::size_t tap;
};

// Calls visit(out_site, refs) once per output site with every in-bounds (input site, tap) pair, taps ascending.
template <typename Visit>
void for_each_output_site(const ConvGeometry& g, const Dims& in, const Dims& out, Visit&& visit) {
  std::vector<TapRef> refs;
  refs.reserve(g.kernel.volume());
  std::size_t current = 0;
  bool open = false;
  for_each_tap(g, in, out, [&](std::size_t os, std::size_t is, std::size_t tap) {
    if (open && os != current) {
      visit(current, std::span<const TapRef>(refs));
      refs.clear();
    }
    current = os;
    open = true;
    refs.push_back({is, tap});
  });
  if (open) visit(current, std::span<const TapRef>(refs));
}

// Calls visit(in_site, refs) once per input site with every (output site, tap) pair that reads it.
template <typename Visit>
void for_each_input_site(const ConvGeometry& g, const Dims& in, const Dims& out, Visit&& visit) {
  // Output coordinate reading input coordinate i through tap k, or -1.
  auto reader = [](std::size_t i, std::size_t k, std::size_t stride, std::size_t dilation, std::size_t pad,
                   std::size_t extent) -> index_t {
    const index_t num = index_t(i + pad) - index_t(k * dilation);
    if (num < 0 || num % index_t(stride) != 0) return -1;
    const index_t o = num / index_t(stride);
    return o < index_t(extent) ? o : -1;
  };
  std::vector<TapRef> refs;
  refs.reserve(g.kernel.volume());
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t ti = 0; ti < in.t; ++ti)
      for (std::size_t hi = 0; hi < in.h; ++hi)
        for (std::size_t wi = 0; wi < in.w; ++wi) {
          refs.clear();
          for (std::size_t kt = 0; kt < g.kernel.t; ++kt) {
            const index_t to = reader(ti, kt, g.stride.t, g.dilation.t, g.padding.t, out.t);
            if (to < 0) continue;
            for (std::size_t kh = 0; kh < g.kernel.h; ++kh) {
              const index_t ho = reader(hi, kh, g.stride.h, g.dilation.h, g.padding.h, out.h);
              if (ho < 0) continue;
              for (std::size_t kw = 0; kw < g.kernel.w; ++kw) {
                const index_t wo = reader(wi, kw, g.stride.w, g.dilation.w, g.padding.w, out.w);
                if (wo < 0) continue;
                const std::size_t os =
                    ((n * out.t + std::size_t(to)) * out.h + std::size_t(ho)) * out.w + std::size_t(wo);
                refs.push_back({os, tap_index(g, kt, kh, kw)});
              }
            }
          }
          visit(((n * in.t + ti) * in.h + hi) * in.w + wi, std::span<const TapRef>(refs));
        }
}

// Splits [0, width) into register tiles of 16/8/4/2/1 lanes and calls f(tile_tag, offset).
template <typename F>
void for_each_tile(std::size_t width, F&& f) {
  std::size_t off = 0;
  auto run = [&](auto tag) {
    constexpr std::size_t b = decltype(tag)::value;
    while (width - off >= b) {
      f(tag, off);
      off += b;
    }
  };
  run(std::integral_constant<std::size_t, 16>{});
  run(std::integral_constant<std::size_t, 8>{});
  run(std::integral_constant<std::size_t, 4>{});
  run(std::integral_constant<std::size_t, 2>{});
  run(std::integral_constant<std::size_t, 1>{});
}

// acc[0..B) += sum_j m[j * stride + 0..B) * v[j] for j < rows. Even and odd rows go to separate
// accumulators so consecutive FMAs do not wait on each other.
template <std::size_t B>
inline void gemv_tile(real* __restrict acc, const real* __restrict m, std::size_t stride, const real* __restrict v,
                      std::size_t rows) {
  real a[B], b[B];
  for (std::size_t k = 0; k < B; ++k) {
    a[k] = acc[k];
    b[k] = 0;
  }
  std::size_t j = 0;
  for (; j + 1 < rows; j += 2) {
    const real v0 = v[j], v1 = v[j + 1];
    const real* m0 = m + j * stride;
    const real* m1 = m0 + stride;
    for (std::size_t k = 0; k < B; ++k) {
      a[k] += m0[k] * v0;
      b[k] += m1[k] * v1;
    }
  }
  if (j < rows) {
    const real* m0 = m + j * stride;
    for (std::size_t k = 0; k < B; ++k) a[k] += m0[k] * v[j];
  }
  for (std::size_t k = 0; k < B; ++k) acc[k] = a[k] + b[k];
}

}  // namespace

void ConvGeometry::validate() const {
  if (in_channels == 0 || out_channels == 0 || groups == 0) throw ShapeError("conv3d: zero channel count");
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv3d: channels (" + std::to_string(in_channels) + " -> " + std::to_string(out_channels) +
                     ") not divisible by groups " + std::to_string(groups));
  }
  if (kernel.volume() == 0 || stride.volume() == 0 || dilation.volume() == 0) {
    throw ShapeError("conv3d: kernel, stride and dilation extents must be >= 1");
  }
}

Dims ConvGeometry::output_dims(const Dims& in) const {
  auto axis = [](std::size_t extent, std::size_t k, std::size_t s, std::size_t d, std::size_t p) -> index_t {
    const index_t span = index_t(d * (k - 1) + 1);
    const index_t room = index_t(extent + 2 * p) - span;
    return room < 0 ? 0 : room / index_t(s) + 1;
  };
  const index_t t = axis(in.t, kernel.t, stride.t, dilation.t, padding.t);
  const index_t h = axis(in.h, kernel.h, stride.h, dilation.h, padding.h);
  const index_t w = axis(in.w, kernel.w, stride.w, dilation.w, padding.w);
  if (t < 1 || h < 1 || w < 1) throw ShapeError("conv3d: non-positive output extent for input " + in.str());
  return Dims{in.n, std::size_t(t), std::size_t(h), std::size_t(w), out_channels};
}

ConvGeometry ConvGeometry::same(std::size_t in, std::size_t out, Extent3 kernel, Extent3 dilation,
                                std::size_t groups) {
  ConvGeometry g;
  g.in_channels = in;
  g.out_channels = out;
  g.groups = groups;
  g.kernel = kernel;
  g.dilation = dilation;
  g.padding = {dilation.t * (kernel.t - 1) / 2, dilation.h * (kernel.h - 1) / 2, dilation.w * (kernel.w - 1) / 2};
  return g;
}

VideoTensor conv3d(const VideoTensor& x, const ConvGeometry& g, std::span<const real> weights,
                   std::span<const real> bias) {
  check_params(g, weights.size(), bias.size());
  check_input(g, x.dims());
  const Dims in = x.dims();
  const Dims od = g.output_dims(in);
  VideoTensor y(od);

  const std::size_t oc = g.out_channels;
  real* ybase = y.data().data();
  const real* xbase = x.data().data();
  if (!bias.empty()) {
    for (std::size_t s = 0; s < od.sites(); ++s)
      for (std::size_t o = 0; o < oc; ++o) ybase[s * oc + o] = bias[o];
  }

  if (g.depthwise()) {
    const std::vector<real> wd = pack_depthwise(g, weights);
    for_each_tap(g, in, od, [&](std::size_t os, std::size_t is, std::size_t tap) {
      fma_into(ybase + os * oc, xbase + is * oc, wd.data() + tap * oc, oc);
    });
    return y;
  }

  const std::vector<real> wp = pack_in_out(g, weights);
  const std::size_t taps = g.kernel.volume(), ipg = g.in_per_group(), opg = g.out_per_group();
  const std::size_t ic = g.in_channels;
  for_each_output_site(g, in, od, [&](std::size_t os, std::span<const TapRef> refs) {
    real* ys = ybase + os * oc;
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      for_each_tile(opg, [&](auto tag, std::size_t ob) {
        constexpr std::size_t b = decltype(tag)::value;
        real* acc = ys + grp * opg + ob;
        for (const TapRef& r : refs) {
          const real* wrow = wp.data() + (grp * taps + r.tap) * ipg * opg + ob;
          gemv_tile<b>(acc, wrow, opg, xbase + r.site * ic + grp * ipg, ipg);
        }
      });
    }
  });
  return y;
}

VideoTensor conv3d(const VideoTensor& x, const ConvKernel& k) { return conv3d(x, k.geometry, k.weights, k.bias); }

VideoTensor conv3d_oracle(const VideoTensor& x, const ConvKernel& k) {
  const ConvGeometry& g = k.geometry;
  check_params(g, k.weights.size(), k.bias.size());
  check_input(g, x.dims());
  const Dims in = x.dims();
  const Dims od = g.output_dims(in);
  VideoTensor y(od);
  const std::size_t ipg = g.in_per_group(), opg = g.out_per_group();

  for (std::size_t n = 0; n < od.n; ++n)
    for (std::size_t o = 0; o < od.c; ++o)
      for (std::size_t to = 0; to < od.t; ++to)
        for (std::size_t ho = 0; ho < od.h; ++ho)
          for (std::size_t wo = 0; wo < od.w; ++wo) {
            real acc = k.bias.empty() ? real(0) : k.bias[o];
            const std::size_t group = o / opg;
            for (std::size_t i = 0; i < ipg; ++i)
              for (std::size_t kt = 0; kt < g.kernel.t; ++kt)
                for (std::size_t kh = 0; kh < g.kernel.h; ++kh)
                  for (std::size_t kw = 0; kw < g.kernel.w; ++kw) {
                    const index_t ti = index_t(to * g.stride.t + kt * g.dilation.t) - index_t(g.padding.t);
                    const index_t hi = index_t(ho * g.stride.h + kh * g.dilation.h) - index_t(g.padding.h);
                    const index_t wi = index_t(wo * g.stride.w + kw * g.dilation.w) - index_t(g.padding.w);
                    if (ti < 0 || hi < 0 || wi < 0 || ti >= index_t(in.t) || hi >= index_t(in.h) ||
                        wi >= index_t(in.w)) {
                      continue;
                    }
                    const real wv = k.weights[(((o * ipg + i) * g.kernel.t + kt) * g.kernel.h + kh) * g.kernel.w + kw];
                    acc += wv * x(n, std::size_t(ti), std::size_t(hi), std::size_t(wi), group * ipg + i);
                  }
            y(n, to, ho, wo, o) = acc;
          }
  return y;
}

VideoTensor conv3d_backward_input(const VideoTensor& grad_out, const Dims& input_dims, const ConvGeometry& g,
                                  std::span<const real> weights) {
  check_params(g, weights.size(), 0);
  check_input(g, input_dims);
  const Dims od = g.output_dims(input_dims);
  require_same_dims(grad_out.dims(), od, "conv3d_backward_input");
  VideoTensor dx(input_dims);

  real* dxbase = dx.data().data();
  const real* dybase = grad_out.data().data();
  const std::size_t oc = g.out_channels, ic = g.in_channels;

  if (g.depthwise()) {
    const std::vector<real> wd = pack_depthwise(g, weights);
    for_each_tap(g, input_dims, od, [&](std::size_t os, std::size_t is, std::size_t tap) {
      fma_into(dxbase + is * ic, dybase + os * oc, wd.data() + tap * oc, oc);
    });
    return dx;
  }

  const std::vector<real> wt = pack_out_in(g, weights);
  const std::size_t taps = g.kernel.volume(), ipg = g.in_per_group(), opg = g.out_per_group();
  for_each_input_site(g, input_dims, od, [&](std::size_t is, std::span<const TapRef> refs) {
    real* dxs = dxbase + is * ic;
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      for_each_tile(ipg, [&](auto tag, std::size_t ib) {
        constexpr std::size_t b = decltype(tag)::value;
        real* acc = dxs + grp * ipg + ib;
        for (const TapRef& r : refs) {
          const real* wrow = wt.data() + (grp * taps + r.tap) * opg * ipg + ib;
          gemv_tile<b>(acc, wrow, ipg, dybase + r.site * oc + grp * opg, opg);
        }
      });
    }
  });
  return dx;
}

void conv3d_backward_params(const VideoTensor& x, const VideoTensor& grad_out, const ConvGeometry& g,
                            std::span<real> grad_weights, std::span<real> grad_bias) {
  check_params(g, grad_weights.size(), grad_bias.size());
  check_input(g, x.dims());
  const Dims od = g.output_dims(x.dims());
  require_same_dims(grad_out.dims(), od, "conv3d_backward_params");

  const std::size_t oc = g.out_channels, ic = g.in_channels;
  const real* xbase = x.data().data();
  const real* dybase = grad_out.data().data();
  const std::size_t taps = g.kernel.volume(), ipg = g.in_per_group(), opg = g.out_per_group();

  if (!grad_bias.empty()) {
    for (std::size_t s = 0; s < od.sites(); ++s)
      for (std::size_t o = 0; o < oc; ++o) grad_bias[o] += dybase[s * oc + o];
  }

  if (g.depthwise()) {
    std::vector<real> dwd(grad_weights.size(), real(0));
    for_each_tap(g, x.dims(), od, [&](std::size_t os, std::size_t is, std::size_t tap) {
      fma_into(dwd.data() + tap * oc, xbase + is * ic, dybase + os * oc, oc);
    });
    for (std::size_t tap = 0; tap < taps; ++tap)
      for (std::size_t ch = 0; ch < oc; ++ch) grad_weights[ch * taps + tap] += dwd[tap * oc + ch];
    return;
  }

  // (output site, input site) pairs bucketed by tap, each bucket in output-site order.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> pairs(taps);
  for_each_tap(g, x.dims(), od,
               [&](std::size_t os, std::size_t is, std::size_t tap) { pairs[tap].emplace_back(os, is); });

  std::vector<real> dwp(grad_weights.size(), real(0));
  for (std::size_t grp = 0; grp < g.groups; ++grp)
    for (std::size_t tap = 0; tap < taps; ++tap)
      for_each_tile(opg, [&](auto tag, std::size_t ob) {
        constexpr std::size_t b = decltype(tag)::value;
        for (std::size_t i = 0; i < ipg; i += 2) {
          const bool two = i + 1 < ipg;
          real a0[b] = {}, a1[b] = {};
          for (const auto& [os, is] : pairs[tap]) {
            const real* dy = dybase + os * oc + grp * opg + ob;
            const real* xs = xbase + is * ic + grp * ipg + i;
            const real x0 = xs[0], x1 = two ? xs[1] : real(0);
            for (std::size_t k = 0; k < b; ++k) {
              a0[k] += dy[k] * x0;
              a1[k] += dy[k] * x1;
            }
          }
          real* row = dwp.data() + ((grp * taps + tap) * ipg + i) * opg + ob;
          for (std::size_t k = 0; k < b; ++k) row[k] += a0[k];
          if (two)
            for (std::size_t k = 0; k < b; ++k) row[opg + k] += a1[k];
        }
      });
  for (std::size_t grp = 0; grp < g.groups; ++grp)
    for (std::size_t tap = 0; tap < taps; ++tap)
      for (std::size_t i = 0; i < ipg; ++i)
        for (std::size_t o = 0; o < opg; ++o)
          grad_weights[weight_index(g, grp * opg + o, i, tap)] += dwp[((grp * taps + tap) * ipg + i) * opg + o];
}

}  // namespace can
