#include "can/autograd.hpp"

#include <atomic>
#include <cmath>
#include <numeric>

#include "can/ops.hpp"

namespace can {

namespace {

enum class Fault { none, sigmoid, conv3d, temporal_diff, channel_pool, spatial_pool, softmax };

std::atomic<Fault> g_fault{Fault::none};

constexpr real kFaultScale = real(1.5);

real fault_gain(Fault op) { return g_fault.load(std::memory_order_relaxed) == op ? kFaultScale : real(1); }

void apply_fault(Fault op, VideoTensor& g) {
  const real k = fault_gain(op);
  if (k != real(1)) {
    for (real& v : g.data()) v *= k;
  }
}

}  // namespace

void set_adjoint_fault(std::string_view op) {
  Fault f = Fault::none;
  if (op == "sigmoid") f = Fault::sigmoid;
  else if (op == "conv3d") f = Fault::conv3d;
  else if (op == "temporal_diff") f = Fault::temporal_diff;
  else if (op == "channel_pool") f = Fault::channel_pool;
  else if (op == "spatial_pool") f = Fault::spatial_pool;
  else if (op == "softmax") f = Fault::softmax;
  else if (!op.empty()) throw std::invalid_argument("unknown adjoint fault '" + std::string(op) + "'");
  g_fault.store(f);
}

std::string_view adjoint_fault() {
  switch (g_fault.load()) {
    case Fault::sigmoid: return "sigmoid";
    case Fault::conv3d: return "conv3d";
    case Fault::temporal_diff: return "temporal_diff";
    case Fault::channel_pool: return "channel_pool";
    case Fault::spatial_pool: return "spatial_pool";
    case Fault::softmax: return "softmax";
    case Fault::none: break;
  }
  return "";
}

Param::Param(std::string n, std::vector<std::size_t> s, real fill) : name(std::move(n)), shape(std::move(s)) {
  const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t(1), std::multiplies<>());
  value.assign(shape.empty() ? 0 : count, fill);
  grad.assign(value.size(), real(0));
}

void Param::zero_grad() { std::fill(grad.begin(), grad.end(), real(0)); }

void init_normal(Param& p, real stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, double(stddev));
  for (real& v : p.value) v = real(dist(rng));
}

ConvKernel ConvLayer::kernel() const { return ConvKernel{geometry, weight.value, bias.value}; }

ConvLayer ConvLayer::create(const std::string& name, const ConvGeometry& g, bool with_bias, Rng& rng) {
  g.validate();
  ConvLayer layer;
  layer.geometry = g;
  layer.weight = Param(name + ".weight",
                       {g.out_channels, g.in_per_group(), g.kernel.t, g.kernel.h, g.kernel.w});
  const real fan_in = real(g.in_per_group() * g.kernel.volume());
  init_normal(layer.weight, std::sqrt(real(2) / fan_in), rng);
  if (with_bias) layer.bias = Param(name + ".bias", {g.out_channels});
  else layer.bias = Param(name + ".bias", {});
  return layer;
}

Var Tape::push(VideoTensor value, bool requires_grad, std::function<void()> backward) {
  if (backward_done_) throw StateError("Tape: cannot record after backward(); start a new tape");
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(VideoTensor value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

VideoTensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.has_grad ? n.grad : VideoTensor(n.value.dims());
}

void Tape::accumulate(Var v, const VideoTensor& g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  require_same_dims(n.value.dims(), g.dims(), "Tape gradient");
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
    return;
  }
  real* dst = n.grad.data().data();
  const real* src = g.data().data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

std::vector<real>& Tape::local_grad(const Param& p) {
  auto [it, inserted] = param_index_.try_emplace(&p, param_grads_.size());
  if (inserted) param_grads_.emplace_back(p.size(), real(0));
  return param_grads_[it->second];
}

std::uint64_t Tape::kink_signature() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ull;
  };
  for (const Kink& k : kinks_) {
    const VideoTensor& x = value(k.input);
    mix(std::uint64_t(k.kind));
    switch (k.kind) {
      case KinkKind::relu:
        for (real v : x.data()) mix(v > 0);
        break;
      case KinkKind::channel_max: {
        // routing a unit gradient through the max channel marks the selected input
        const Dims d = x.dims();
        VideoTensor g(Dims{d.n, d.t, d.h, d.w, 2});
        for (std::size_t s = 0; s < g.dims().sites(); ++s) g.data()[2 * s + 1] = 1;
        const VideoTensor picked = channel_pool_backward(x, g);
        for (real v : picked.data()) mix(v > 0);
        break;
      }
      case KinkKind::spatial_max: {
        const VideoTensor ones(can::max_pool_spatial(x, k.window, k.stride, k.pad).dims(), real(1));
        const VideoTensor picked = max_pool_spatial_backward(x, ones, k.window, k.stride, k.pad);
        for (real v : picked.data()) mix(std::uint64_t(v));
        break;
      }
    }
  }
  return h;
}

std::span<const real> Tape::param_grad(const Param& p) const {
  auto it = param_index_.find(&p);
  if (it == param_index_.end()) return {};
  return param_grads_[it->second];
}

void Tape::accumulate_param_grads(std::span<Param* const> params) const {
  for (Param* p : params) {
    auto it = param_index_.find(p);
    if (it == param_index_.end()) continue;
    const std::vector<real>& g = param_grads_[it->second];
    for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
  }
}

void Tape::backward(Var out, const VideoTensor& seed) {
  if (backward_done_) throw StateError("Tape: backward() already ran; call zero_grad() first");
  if (out.id >= nodes_.size()) throw StateError("Tape: output handle does not belong to this tape");
  require_same_dims(nodes_[out.id].value.dims(), seed.dims(), "Tape::backward seed");
  backward_done_ = true;
  accumulate(out, seed);
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward();
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    n.grad = VideoTensor();
    n.has_grad = false;
  }
  for (auto& g : param_grads_) std::fill(g.begin(), g.end(), real(0));
  backward_done_ = false;
}

Var Tape::conv3d(Var x, const ConvLayer& layer) {
  VideoTensor y = can::conv3d(value(x), layer.geometry, layer.weight.value, layer.bias.value);
  const std::size_t out_id = nodes_.size();
  return push(std::move(y), true, [this, x, out_id, &layer] {
    VideoTensor g = nodes_[out_id].grad;
    apply_fault(Fault::conv3d, g);
    std::vector<real>& dw = local_grad(layer.weight);
    if (layer.has_bias()) {
      std::vector<real>& db = local_grad(layer.bias);
      conv3d_backward_params(value(x), g, layer.geometry, dw, db);
    } else {
      conv3d_backward_params(value(x), g, layer.geometry, dw, {});
    }
    if (needs(x)) accumulate(x, conv3d_backward_input(g, value(x).dims(), layer.geometry, layer.weight.value));
  });
}

Var Tape::temporal_diff(Var x) {
  const std::size_t out_id = nodes_.size();
  return push(can::temporal_diff(value(x)), needs(x), [this, x, out_id] {
    VideoTensor g = temporal_diff_backward(nodes_[out_id].grad);
    apply_fault(Fault::temporal_diff, g);
    accumulate(x, g);
  });
}

Var Tape::channel_pool(Var x) {
  const std::size_t out_id = nodes_.size();
  kinks_.push_back(Kink{KinkKind::channel_max, x});
  return push(can::channel_pool(value(x)), needs(x), [this, x, out_id] {
    VideoTensor g = channel_pool_backward(value(x), nodes_[out_id].grad);
    apply_fault(Fault::channel_pool, g);
    accumulate(x, g);
  });
}

Var Tape::spatial_pool(Var x) {
  const std::size_t out_id = nodes_.size();
  return push(can::spatial_pool(value(x)), needs(x), [this, x, out_id] {
    VideoTensor g = spatial_pool_backward(nodes_[out_id].grad, value(x).dims());
    apply_fault(Fault::spatial_pool, g);
    accumulate(x, g);
  });
}

Var Tape::global_avg_pool(Var x) {
  const std::size_t out_id = nodes_.size();
  return push(can::global_avg_pool(value(x)), needs(x), [this, x, out_id] {
    accumulate(x, global_avg_pool_backward(nodes_[out_id].grad, value(x).dims()));
  });
}

Var Tape::max_pool_spatial(Var x, std::size_t window, std::size_t stride, std::size_t pad) {
  const std::size_t out_id = nodes_.size();
  kinks_.push_back(Kink{KinkKind::spatial_max, x, window, stride, pad});
  return push(can::max_pool_spatial(value(x), window, stride, pad), needs(x),
              [this, x, out_id, window, stride, pad] {
                accumulate(x, max_pool_spatial_backward(value(x), nodes_[out_id].grad, window, stride, pad));
              });
}

Var Tape::concat(std::span<const Var> xs) {
  std::vector<VideoTensor> values;
  std::vector<Var> inputs(xs.begin(), xs.end());
  bool req = false;
  for (Var v : inputs) {
    values.push_back(value(v));
    req = req || needs(v);
  }
  const std::size_t out_id = nodes_.size();
  return push(concat_channels(values), req, [this, inputs, out_id] {
    std::size_t begin = 0;
    for (Var v : inputs) {
      const std::size_t c = value(v).dims().c;
      if (needs(v)) accumulate(v, slice_channels(nodes_[out_id].grad, begin, begin + c));
      begin += c;
    }
  });
}

Var Tape::slice(Var x, std::size_t begin, std::size_t end) {
  const std::size_t out_id = nodes_.size();
  return push(slice_channels(value(x), begin, end), needs(x), [this, x, out_id, begin, end] {
    const Dims d = value(x).dims();
    VideoTensor g(d);
    const VideoTensor& go = nodes_[out_id].grad;
    const std::size_t width = end - begin;
    for (std::size_t s = 0; s < d.sites(); ++s)
      std::copy_n(go.data().data() + s * width, width, g.data().data() + s * d.c + begin);
    accumulate(x, g);
  });
}

Var Tape::sigmoid(Var x) {
  const std::size_t out_id = nodes_.size();
  return push(can::sigmoid(value(x)), needs(x), [this, x, out_id] {
    VideoTensor g = sigmoid_backward(nodes_[out_id].value, nodes_[out_id].grad);
    apply_fault(Fault::sigmoid, g);
    accumulate(x, g);
  });
}

Var Tape::cross_entropy(Var logits, std::span<const std::size_t> labels) {
  CrossEntropy ce = softmax_cross_entropy(value(logits), labels);
  const std::size_t out_id = nodes_.size();
  return push(VideoTensor(Dims{}, ce.loss), needs(logits), [this, logits, out_id, g = std::move(ce.grad)] {
    accumulate(logits, can::scale(g, nodes_[out_id].grad.data()[0]));
  });
}

Var Tape::relu(Var x) {
  const std::size_t out_id = nodes_.size();
  kinks_.push_back(Kink{KinkKind::relu, x});
  return push(can::relu(value(x)), needs(x),
              [this, x, out_id] { accumulate(x, relu_backward(value(x), nodes_[out_id].grad)); });
}

Var Tape::hadamard(Var a, Var b) {
  const std::size_t out_id = nodes_.size();
  return push(can::hadamard(value(a), value(b)), needs(a) || needs(b), [this, a, b, out_id] {
    const VideoTensor& g = nodes_[out_id].grad;
    if (needs(a)) accumulate(a, can::hadamard(g, value(b)));
    if (needs(b)) accumulate(b, reduce_to(can::hadamard(g, value(a)), value(b).dims()));
  });
}

Var Tape::add(Var a, Var b) {
  const std::size_t out_id = nodes_.size();
  return push(can::add(value(a), value(b)), needs(a) || needs(b), [this, a, b, out_id] {
    const VideoTensor& g = nodes_[out_id].grad;
    if (needs(a)) accumulate(a, g);
    if (needs(b)) accumulate(b, reduce_to(g, value(b).dims()));
  });
}

Var Tape::scale(Var x, real s) {
  const std::size_t out_id = nodes_.size();
  return push(can::scale(value(x), s), needs(x),
              [this, x, out_id, s] { accumulate(x, can::scale(nodes_[out_id].grad, s)); });
}

Var Tape::channel_affine(Var x, const Param& gain, const Param& shift) {
  const std::size_t out_id = nodes_.size();
  return push(can::channel_affine(value(x), gain.value, shift.value), true, [this, x, out_id, &gain, &shift] {
    const VideoTensor& g = nodes_[out_id].grad;
    const VideoTensor& xv = value(x);
    const std::size_t c = xv.dims().c;
    std::vector<real>& dg = local_grad(gain);
    std::vector<real>& ds = local_grad(shift);
    for (std::size_t s = 0; s < xv.dims().sites(); ++s)
      for (std::size_t k = 0; k < c; ++k) {
        dg[k] += g.data()[s * c + k] * xv.data()[s * c + k];
        ds[k] += g.data()[s * c + k];
      }
    if (needs(x)) {
      VideoTensor dx(xv.dims());
      for (std::size_t s = 0; s < xv.dims().sites(); ++s)
        for (std::size_t k = 0; k < c; ++k) dx.data()[s * c + k] = g.data()[s * c + k] * gain.value[k];
      accumulate(x, dx);
    }
  });
}

Var Tape::linear(Var x, const Param& weight, const Param& bias) {
  const std::size_t out_features = bias.size();
  const std::size_t out_id = nodes_.size();
  return push(can::linear(value(x), weight.value, bias.value, out_features), true,
              [this, x, out_id, &weight, &bias, out_features] {
                const VideoTensor& g = nodes_[out_id].grad;
                const VideoTensor& xv = value(x);
                const std::size_t c = xv.dims().c;
                std::vector<real>& dw = local_grad(weight);
                std::vector<real>& db = local_grad(bias);
                VideoTensor dx(xv.dims());
                for (std::size_t n = 0; n < xv.dims().n; ++n) {
                  const real* gv = g.site(n, 0, 0, 0);
                  const real* xs = xv.site(n, 0, 0, 0);
                  real* dxs = dx.site(n, 0, 0, 0);
                  for (std::size_t k = 0; k < out_features; ++k) {
                    db[k] += gv[k];
                    for (std::size_t i = 0; i < c; ++i) {
                      dw[k * c + i] += gv[k] * xs[i];
                      dxs[i] += gv[k] * weight.value[k * c + i];
                    }
                  }
                }
                if (needs(x)) accumulate(x, dx);
              });
}

Var Tape::softmax_weighted_sum(std::span<const Var> xs, const Param& logits) {
  if (xs.empty() || xs.size() != logits.size()) {
    throw ShapeError("softmax_weighted_sum: need one logit per input (" + std::to_string(xs.size()) + " inputs, " +
                     std::to_string(logits.size()) + " logits)");
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  const std::vector<real> w = can::softmax(logits.value);
  const Dims d = value(inputs[0]).dims();
  VideoTensor y(d);
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    const VideoTensor& xj = value(inputs[j]);
    require_same_dims(d, xj.dims(), "softmax_weighted_sum");
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] += w[j] * xj.data()[i];
  }
  const std::size_t out_id = nodes_.size();
  return push(std::move(y), true, [this, inputs, w, out_id, &logits] {
    const VideoTensor& g = nodes_[out_id].grad;
    std::vector<real> dot(inputs.size(), real(0));
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      const VideoTensor& xj = value(inputs[j]);
      for (std::size_t i = 0; i < g.size(); ++i) dot[j] += g.data()[i] * xj.data()[i];
      if (needs(inputs[j])) accumulate(inputs[j], can::scale(g, w[j]));
    }
    real mean = 0;
    for (std::size_t j = 0; j < inputs.size(); ++j) mean += w[j] * dot[j];
    std::vector<real>& dl = local_grad(logits);
    const real k = fault_gain(Fault::softmax);
    for (std::size_t j = 0; j < inputs.size(); ++j) dl[j] += k * w[j] * (dot[j] - mean);
  });
}

}  // namespace can
