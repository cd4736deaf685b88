#include "can/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace can {

VideoTensor temporal_diff(const VideoTensor& x) {
  const Dims d = x.dims();
  VideoTensor out(d);
  const std::size_t frame = d.h * d.w * d.c;
  const real* xs = x.data().data();
  real* os = out.data().data();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t + 1 < d.t; ++t) {
      const std::size_t base = (n * d.t + t) * frame;
      for (std::size_t k = 0; k < frame; ++k) os[base + k] = xs[base + frame + k] - xs[base + k];
    }
  return out;
}

VideoTensor temporal_diff_backward(const VideoTensor& grad_out) {
  const Dims d = grad_out.dims();
  VideoTensor dx(d);
  const std::size_t frame = d.h * d.w * d.c;
  const real* g = grad_out.data().data();
  real* o = dx.data().data();
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t + 1 < d.t; ++t) {
      const std::size_t base = (n * d.t + t) * frame;
      for (std::size_t k = 0; k < frame; ++k) {
        o[base + frame + k] += g[base + k];
        o[base + k] -= g[base + k];
      }
    }
  return dx;
}

VideoTensor channel_pool(const VideoTensor& x) {
  const Dims d = x.dims();
  VideoTensor out(Dims{d.n, d.t, d.h, d.w, 2});
  const real* xs = x.data().data();
  real* os = out.data().data();
  for (std::size_t s = 0; s < d.sites(); ++s) {
    const real* v = xs + s * d.c;
    real sum = 0, mx = v[0];
    for (std::size_t c = 0; c < d.c; ++c) {
      sum += v[c];
      mx = std::max(mx, v[c]);
    }
    os[2 * s] = sum / real(d.c);
    os[2 * s + 1] = mx;
  }
  return out;
}

VideoTensor channel_pool_backward(const VideoTensor& x, const VideoTensor& grad_out) {
  const Dims d = x.dims();
  require_same_dims(grad_out.dims(), Dims{d.n, d.t, d.h, d.w, 2}, "channel_pool_backward");
  VideoTensor dx(d);
  const real* xs = x.data().data();
  const real* g = grad_out.data().data();
  real* o = dx.data().data();
  for (std::size_t s = 0; s < d.sites(); ++s) {
    const real* v = xs + s * d.c;
    const real gm = g[2 * s] / real(d.c);
    std::size_t arg = 0;
    for (std::size_t c = 0; c < d.c; ++c) {
      o[s * d.c + c] = gm;
      if (v[c] > v[arg]) arg = c;
    }
    o[s * d.c + arg] += g[2 * s + 1];
  }
  return dx;
}

VideoTensor spatial_pool(const VideoTensor& x) {
  const Dims d = x.dims();
  VideoTensor out(Dims{d.n, d.t, 1, 1, d.c});
  const real inv = real(1) / real(d.h * d.w);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t) {
      real* o = out.site(n, t, 0, 0);
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w) {
          const real* v = x.site(n, t, h, w);
          for (std::size_t c = 0; c < d.c; ++c) o[c] += v[c];
        }
      for (std::size_t c = 0; c < d.c; ++c) o[c] *= inv;
    }
  return out;
}

VideoTensor spatial_pool_backward(const VideoTensor& grad_out, const Dims& input_dims) {
  const Dims& d = input_dims;
  require_same_dims(grad_out.dims(), Dims{d.n, d.t, 1, 1, d.c}, "spatial_pool_backward");
  VideoTensor dx(d);
  const real inv = real(1) / real(d.h * d.w);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t) {
      const real* g = grad_out.site(n, t, 0, 0);
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w) {
          real* o = dx.site(n, t, h, w);
          for (std::size_t c = 0; c < d.c; ++c) o[c] = g[c] * inv;
        }
    }
  return dx;
}

VideoTensor global_avg_pool(const VideoTensor& x) {
  const Dims d = x.dims();
  VideoTensor out(Dims{d.n, 1, 1, 1, d.c});
  const std::size_t per = d.t * d.h * d.w;
  const real inv = real(1) / real(per);
  for (std::size_t n = 0; n < d.n; ++n) {
    real* o = out.site(n, 0, 0, 0);
    const real* v = x.data().data() + n * per * d.c;
    for (std::size_t s = 0; s < per; ++s)
      for (std::size_t c = 0; c < d.c; ++c) o[c] += v[s * d.c + c];
    for (std::size_t c = 0; c < d.c; ++c) o[c] *= inv;
  }
  return out;
}

VideoTensor global_avg_pool_backward(const VideoTensor& grad_out, const Dims& input_dims) {
  const Dims& d = input_dims;
  require_same_dims(grad_out.dims(), Dims{d.n, 1, 1, 1, d.c}, "global_avg_pool_backward");
  VideoTensor dx(d);
  const std::size_t per = d.t * d.h * d.w;
  const real inv = real(1) / real(per);
  for (std::size_t n = 0; n < d.n; ++n) {
    const real* g = grad_out.site(n, 0, 0, 0);
    real* o = dx.data().data() + n * per * d.c;
    for (std::size_t s = 0; s < per; ++s)
      for (std::size_t c = 0; c < d.c; ++c) o[s * d.c + c] = g[c] * inv;
  }
  return dx;
}

namespace {

Dims pooled_dims(const Dims& d, std::size_t window, std::size_t stride, std::size_t pad) {
  if (window == 0 || stride == 0) throw ShapeError("max_pool_spatial: window and stride must be >= 1");
  auto axis = [&](std::size_t e) -> std::ptrdiff_t {
    const std::ptrdiff_t room = std::ptrdiff_t(e + 2 * pad) - std::ptrdiff_t(window);
    return room < 0 ? 0 : room / std::ptrdiff_t(stride) + 1;
  };
  const std::ptrdiff_t h = axis(d.h), w = axis(d.w);
  if (h < 1 || w < 1) throw ShapeError("max_pool_spatial: non-positive output extent for " + d.str());
  return Dims{d.n, d.t, std::size_t(h), std::size_t(w), d.c};
}

// Calls visit(out_offset, in_offset) for the argmax input of every output element.
template <typename Visit>
void for_each_pool_argmax(const VideoTensor& x, const Dims& od, std::size_t window, std::size_t stride,
                          std::size_t pad, Visit&& visit) {
  const Dims d = x.dims();
  for (std::size_t n = 0; n < od.n; ++n)
    for (std::size_t t = 0; t < od.t; ++t)
      for (std::size_t ho = 0; ho < od.h; ++ho)
        for (std::size_t wo = 0; wo < od.w; ++wo)
          for (std::size_t c = 0; c < od.c; ++c) {
            std::size_t best = 0;
            real best_v = -std::numeric_limits<real>::infinity();
            for (std::size_t kh = 0; kh < window; ++kh) {
              const std::ptrdiff_t hi = std::ptrdiff_t(ho * stride + kh) - std::ptrdiff_t(pad);
              if (hi < 0 || hi >= std::ptrdiff_t(d.h)) continue;
              for (std::size_t kw = 0; kw < window; ++kw) {
                const std::ptrdiff_t wi = std::ptrdiff_t(wo * stride + kw) - std::ptrdiff_t(pad);
                if (wi < 0 || wi >= std::ptrdiff_t(d.w)) continue;
                const std::size_t off = x.offset(n, t, std::size_t(hi), std::size_t(wi), c);
                if (x.data()[off] > best_v) {
                  best_v = x.data()[off];
                  best = off;
                }
              }
            }
            visit(((((n * od.t + t) * od.h + ho) * od.w + wo) * od.c) + c, best);
          }
}

}  // namespace

VideoTensor max_pool_spatial(const VideoTensor& x, std::size_t window, std::size_t stride, std::size_t pad) {
  const Dims od = pooled_dims(x.dims(), window, stride, pad);
  VideoTensor out(od);
  for_each_pool_argmax(x, od, window, stride, pad,
                       [&](std::size_t o, std::size_t i) { out.data()[o] = x.data()[i]; });
  return out;
}

VideoTensor max_pool_spatial_backward(const VideoTensor& x, const VideoTensor& grad_out, std::size_t window,
                                      std::size_t stride, std::size_t pad) {
  const Dims od = pooled_dims(x.dims(), window, stride, pad);
  require_same_dims(grad_out.dims(), od, "max_pool_spatial_backward");
  VideoTensor dx(x.dims());
  for_each_pool_argmax(x, od, window, stride, pad,
                       [&](std::size_t o, std::size_t i) { dx.data()[i] += grad_out.data()[o]; });
  return dx;
}

VideoTensor concat_channels(std::span<const VideoTensor> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input list");
  const Dims first = xs.front().dims();
  std::size_t total = 0;
  for (const auto& x : xs) {
    const Dims d = x.dims();
    if (d.n != first.n || d.t != first.t || d.h != first.h || d.w != first.w) {
      throw ShapeError("concat_channels: leading dims differ: " + first.str() + " vs " + d.str());
    }
    total += d.c;
  }
  VideoTensor out(Dims{first.n, first.t, first.h, first.w, total});
  real* o = out.data().data();
  for (std::size_t s = 0; s < first.sites(); ++s) {
    for (const auto& x : xs) {
      const std::size_t c = x.dims().c;
      std::copy_n(x.data().data() + s * c, c, o);
      o += c;
    }
  }
  return out;
}

VideoTensor slice_channels(const VideoTensor& x, std::size_t begin, std::size_t end) {
  const Dims d = x.dims();
  if (begin >= end || end > d.c) {
    throw ShapeError("slice_channels: bad range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") for C=" + std::to_string(d.c));
  }
  const std::size_t width = end - begin;
  VideoTensor out(Dims{d.n, d.t, d.h, d.w, width});
  for (std::size_t s = 0; s < d.sites(); ++s) {
    std::copy_n(x.data().data() + s * d.c + begin, width, out.data().data() + s * width);
  }
  return out;
}

std::vector<VideoTensor> split_channels(const VideoTensor& x, std::size_t parts) {
  const std::size_t c = x.dims().c;
  if (parts == 0 || c % parts != 0) {
    throw ShapeError("split_channels: C=" + std::to_string(c) + " not divisible by " + std::to_string(parts));
  }
  const std::size_t width = c / parts;
  std::vector<VideoTensor> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) out.push_back(slice_channels(x, p * width, (p + 1) * width));
  return out;
}

real sigmoid(real v) noexcept {
  if (v >= 0) return real(1) / (real(1) + std::exp(-v));
  const real e = std::exp(v);
  return e / (real(1) + e);
}

VideoTensor sigmoid(const VideoTensor& x) {
  VideoTensor out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = sigmoid(x.data()[i]);
  return out;
}

VideoTensor sigmoid_backward(const VideoTensor& y, const VideoTensor& grad_out) {
  require_same_dims(y.dims(), grad_out.dims(), "sigmoid_backward");
  VideoTensor dx(y.dims());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const real s = y.data()[i];
    dx.data()[i] = grad_out.data()[i] * s * (real(1) - s);
  }
  return dx;
}

VideoTensor relu(const VideoTensor& x) {
  VideoTensor out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = std::max(x.data()[i], real(0));
  return out;
}

VideoTensor relu_backward(const VideoTensor& x, const VideoTensor& grad_out) {
  require_same_dims(x.dims(), grad_out.dims(), "relu_backward");
  VideoTensor dx(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) dx.data()[i] = x.data()[i] > 0 ? grad_out.data()[i] : real(0);
  return dx;
}

std::vector<real> softmax(std::span<const real> logits) {
  if (logits.empty()) throw ShapeError("softmax: empty vector");
  const real mx = *std::max_element(logits.begin(), logits.end());
  std::vector<real> out(logits.size());
  real sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (real& v : out) v /= sum;
  return out;
}

bool broadcastable(const Dims& a, const Dims& b) noexcept {
  if (a.n != b.n || a.t != b.t) return false;
  const bool spatial_ok = (b.h == a.h && b.w == a.w) || (b.h == 1 && b.w == 1);
  const bool channel_ok = b.c == a.c || b.c == 1;
  return spatial_ok && channel_ok;
}

namespace {

void require_broadcastable(const Dims& a, const Dims& b, const char* what) {
  if (!broadcastable(a, b)) {
    throw ShapeError(std::string(what) + ": " + b.str() + " does not broadcast to " + a.str());
  }
}

// Offset into broadcast operand `b` for element (n, t, h, w, c) of the full shape.
inline std::size_t broadcast_offset(const Dims& b, std::size_t n, std::size_t t, std::size_t h, std::size_t w,
                                    std::size_t c) {
  const std::size_t bh = b.h == 1 ? 0 : h;
  const std::size_t bw = b.w == 1 ? 0 : w;
  const std::size_t bc = b.c == 1 ? 0 : c;
  return ((((n * b.t + t) * b.h + bh) * b.w + bw) * b.c) + bc;
}

template <typename Op>
VideoTensor broadcast_binary(const VideoTensor& a, const VideoTensor& b, Op op, const char* what) {
  require_broadcastable(a.dims(), b.dims(), what);
  const Dims d = a.dims();
  VideoTensor out(d);
  if (a.dims() == b.dims()) {
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = op(a.data()[i], b.data()[i]);
    return out;
  }
  const Dims bd = b.dims();
  std::size_t i = 0;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w)
          for (std::size_t c = 0; c < d.c; ++c, ++i)
            out.data()[i] = op(a.data()[i], b.data()[broadcast_offset(bd, n, t, h, w, c)]);
  return out;
}

}  // namespace

VideoTensor reduce_to(const VideoTensor& grad, const Dims& target) {
  const Dims d = grad.dims();
  require_broadcastable(d, target, "reduce_to");
  if (d == target) return grad;
  VideoTensor out(target);
  std::size_t i = 0;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w)
          for (std::size_t c = 0; c < d.c; ++c, ++i)
            out.data()[broadcast_offset(target, n, t, h, w, c)] += grad.data()[i];
  return out;
}

VideoTensor hadamard(const VideoTensor& a, const VideoTensor& b) {
  return broadcast_binary(a, b, [](real x, real y) { return x * y; }, "hadamard");
}

VideoTensor add(const VideoTensor& a, const VideoTensor& b) {
  return broadcast_binary(a, b, [](real x, real y) { return x + y; }, "add");
}

VideoTensor scale(const VideoTensor& a, real s) {
  VideoTensor out(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  return out;
}

VideoTensor channel_affine(const VideoTensor& x, std::span<const real> gain, std::span<const real> shift) {
  const Dims d = x.dims();
  if (gain.size() != d.c || shift.size() != d.c) throw ShapeError("channel_affine: parameter length != C");
  VideoTensor out(d);
  const real* xs = x.data().data();
  real* o = out.data().data();
  for (std::size_t s = 0; s < d.sites(); ++s)
    for (std::size_t c = 0; c < d.c; ++c) o[s * d.c + c] = xs[s * d.c + c] * gain[c] + shift[c];
  return out;
}

VideoTensor linear(const VideoTensor& x, std::span<const real> weight, std::span<const real> bias,
                   std::size_t out_features) {
  const Dims d = x.dims();
  if (d.t != 1 || d.h != 1 || d.w != 1) throw ShapeError("linear: expected (N,1,1,1,C) input, got " + d.str());
  if (weight.size() != out_features * d.c || bias.size() != out_features) {
    throw ShapeError("linear: parameter sizes do not match " + std::to_string(d.c) + " -> " +
                     std::to_string(out_features));
  }
  VideoTensor out(Dims{d.n, 1, 1, 1, out_features});
  for (std::size_t n = 0; n < d.n; ++n) {
    const real* v = x.site(n, 0, 0, 0);
    for (std::size_t k = 0; k < out_features; ++k) {
      real acc = bias[k];
      for (std::size_t c = 0; c < d.c; ++c) acc += weight[k * d.c + c] * v[c];
      out(n, 0, 0, 0, k) = acc;
    }
  }
  return out;
}

CrossEntropy softmax_cross_entropy(const VideoTensor& logits, std::span<const std::size_t> labels) {
  const Dims d = logits.dims();
  if (d.t != 1 || d.h != 1 || d.w != 1) throw ShapeError("cross_entropy: expected (N,1,1,1,K) logits");
  if (labels.size() != d.n) throw ShapeError("cross_entropy: label count != batch size");
  CrossEntropy ce{0, VideoTensor(d)};
  for (std::size_t n = 0; n < d.n; ++n) {
    if (labels[n] >= d.c) throw ShapeError("cross_entropy: label out of range");
    const real* z = logits.site(n, 0, 0, 0);
    const std::vector<real> p = softmax(std::span<const real>(z, d.c));
    const real mx = *std::max_element(z, z + d.c);
    real sum = 0;
    for (std::size_t k = 0; k < d.c; ++k) sum += std::exp(z[k] - mx);
    ce.loss += mx + std::log(sum) - z[labels[n]];
    for (std::size_t k = 0; k < d.c; ++k) {
      ce.grad(n, 0, 0, 0, k) = (p[k] - (k == labels[n] ? real(1) : real(0))) / real(d.n);
    }
  }
  ce.loss /= real(d.n);
  return ce;
}

}  // namespace can
