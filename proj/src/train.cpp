#include "can/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "can/ops.hpp"

namespace can {

namespace {

// Runs fn(i) for i in [0, count) on up to `threads` workers. The first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(count, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = count;
      }
    }
  };
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  pool.clear();
  if (error) std::rethrow_exception(error);
}

struct Sample {
  real loss = 0;
  std::size_t rank = 0;
  std::vector<std::vector<real>> grads;  // per bundle; only filled when workers run in parallel
};

class Sgd {
 public:
  Sgd(const std::vector<Param*>& params, const TrainConfig& c) : params_(params), cfg_(c) {
    for (const Param* q : params_) velocity_.emplace_back(q->size(), real(0));
  }

  // v = mu v + (g + wd w); w -= lr v
  void step(double lr) {
    const real mu = real(cfg_.momentum), wd = real(cfg_.weight_decay), eta = real(lr);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Param& q = *params_[k];
      std::vector<real>& v = velocity_[k];
      for (std::size_t i = 0; i < q.size(); ++i) {
        v[i] = mu * v[i] + (q.grad[i] + wd * q.value[i]);
        q.value[i] -= eta * v[i];
      }
    }
  }

 private:
  std::vector<Param*> params_;
  const TrainConfig& cfg_;
  std::vector<std::vector<real>> velocity_;
};

real sample_loss(std::span<const real> z, std::size_t label) {
  const real mx = *std::max_element(z.begin(), z.end());
  real sum = 0;
  for (real v : z) sum += std::exp(v - mx);
  return mx + std::log(sum) - z[label];
}

}  // namespace

void TrainConfig::validate() const {
  if (batch == 0) throw ConfigError("batch size must be >= 1");
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw ConfigError("weight decay must be finite and >= 0");
  if (!(lr_decay > 0) || !std::isfinite(lr_decay)) throw ConfigError("lr decay must be finite and > 0");
  if (threads == 0) throw ConfigError("threads must be >= 1");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double r = lr;
  for (std::size_t s : lr_steps)
    if (epoch >= s) r *= lr_decay;
  return r;
}

std::size_t label_rank(std::span<const real> logits, std::size_t label) {
  if (label >= logits.size()) throw ShapeError("label_rank: label out of range");
  const real z = logits[label];
  std::size_t rank = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (logits[k] > z || (logits[k] == z && k < label)) ++rank;
  }
  return rank;
}

void check_compatible(const NetParams& p, const Dataset& data) {
  if (data.classes != p.spec.classes) {
    throw ConfigError("dataset has " + std::to_string(data.classes) + " classes but network '" + p.spec.name +
                      "' predicts " + std::to_string(p.spec.classes));
  }
  if (data.clip_dims() != p.spec.input_dims(1)) {
    throw ConfigError("dataset clips " + data.clip_dims().str() + " do not fit network input " +
                      p.spec.input_dims(1).str());
  }
}

void calibrate_on(NetParams& p, const Dataset& data, std::span<const std::size_t> indices, std::size_t clips,
                  real residual_scale) {
  check_compatible(p, data);
  clips = std::min(clips, indices.size());
  if (clips == 0) throw ConfigError("calibration needs at least one clip");
  Dims d = data.clip_dims();
  d.n = clips;
  VideoTensor batch(d);
  const std::size_t per_clip = data.clip_dims().size();
  for (std::size_t i = 0; i < clips; ++i) {
    const VideoTensor& f = data.clips.at(indices[i]).frames;
    std::copy(f.data().begin(), f.data().end(), batch.data().begin() + long(i * per_clip));
  }
  calibrate_norms(p, batch, residual_scale);
}

EvalResult evaluate(const NetParams& p, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t threads) {
  check_compatible(p, data);
  EvalResult r;
  r.count = indices.size();
  r.predictions.assign(indices.size(), 0);
  std::vector<real> losses(indices.size());
  std::vector<std::size_t> ranks(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t i) {
    const Clip& clip = data.clips.at(indices[i]);
    const VideoTensor logits = net_forward(p, clip.frames);
    if (!logits.all_finite()) throw NumericError("non-finite logits for clip " + std::to_string(indices[i]));
    const std::span<const real> z = logits.data();
    ranks[i] = label_rank(z, clip.label);
    losses[i] = sample_loss(z, clip.label);
    r.predictions[i] = std::size_t(std::max_element(z.begin(), z.end()) - z.begin());
  });
  if (indices.empty()) return r;
  std::size_t top1 = 0, top5 = 0;
  double loss = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    top1 += ranks[i] < 1;
    top5 += ranks[i] < 5;
    loss += double(losses[i]);
  }
  const double n = double(indices.size());
  r.top1 = double(top1) / n;
  r.top5 = double(top5) / n;
  r.loss = loss / n;
  return r;
}

TrainResult train(NetParams& p, const Dataset& data, const Split& split, const TrainConfig& config,
                  const EpochHook& hook) {
  config.validate();
  check_compatible(p, data);
  for (std::size_t i : split.train)
    if (i >= data.clips.size()) throw ConfigError("split index " + std::to_string(i) + " out of range");
  if (split.train.empty()) throw ConfigError("empty training split");

  const std::vector<Param*> params = p.params();
  Sgd sgd(params, config);
  Rng shuffle_rng(config.seed ^ 0x5DEECE66Dull);
  std::vector<std::size_t> order = split.train;
  TrainResult result;
  result.best = p;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = config.lr_at(epoch);
    double loss_sum = 0;
    std::size_t correct = 0;

    for (std::size_t begin = 0; begin < order.size(); begin += config.batch) {
      ++step;
      const std::size_t end = std::min(order.size(), begin + config.batch);
      const std::size_t count = end - begin;
      const bool parallel = config.threads > 1 && count > 1;
      std::vector<Sample> samples(count);
      p.zero_grad();

      // Each clip gets its own tape; gradients are summed in batch order either way,
      // so the thread count never changes the result.
      parallel_for(count, parallel ? config.threads : 1, [&](std::size_t s) {
        const Clip& clip = data.clips[order[begin + s]];
        Tape tape;
        const Var logits = net_forward(tape, tape.leaf(clip.frames, false), p);
        const std::size_t label = clip.label;
        CrossEntropy ce = softmax_cross_entropy(tape.value(logits), std::span<const std::size_t>(&label, 1));
        if (!std::isfinite(ce.loss)) {
          throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                             std::to_string(epoch + 1) + ")");
        }
        samples[s].loss = ce.loss;
        samples[s].rank = label_rank(tape.value(logits).data(), label);
        for (real& g : ce.grad.data()) g /= real(count);
        tape.backward(logits, ce.grad);
        if (parallel) {
          samples[s].grads.resize(params.size());
          for (std::size_t k = 0; k < params.size(); ++k) {
            const std::span<const real> g = tape.param_grad(*params[k]);
            samples[s].grads[k].assign(g.begin(), g.end());
          }
        } else {
          tape.accumulate_param_grads(params);
        }
      });

      for (const Sample& s : samples) {
        loss_sum += double(s.loss);
        correct += s.rank == 0;
        if (!parallel) continue;
        for (std::size_t k = 0; k < params.size(); ++k) {
          const std::vector<real>& g = s.grads[k];
          std::vector<real>& dst = params[k]->grad;
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
      }
      sgd.step(lr);
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr;
    m.train_loss = loss_sum / double(order.size());
    m.train_top1 = double(correct) / double(order.size());
    const EvalResult val = evaluate(p, data, split.val, config.threads);
    m.val_top1 = val.top1;
    m.val_top5 = val.top5;
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    const bool improved = m.val_top1 > result.best_val_top1;
    if (improved) {
      result.best_val_top1 = m.val_top1;
      result.best_epoch = m.epoch;
      result.best = p;
    }
    result.history.push_back(m);
    if (hook) hook(m, p, improved);
  }
  return result;
}

}  // namespace can
