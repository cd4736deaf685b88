#include <cmath>
#include <limits>

#include "can/train.hpp"
#include "doctest.h"

using namespace can;

namespace {

Dataset tiny_data(std::size_t per_class = 4) {
  SynthConfig c;
  c.clips_per_class = per_class;
  return generate(c);
}

std::vector<std::size_t> all_indices(const Dataset& d) {
  std::vector<std::size_t> v(d.clips.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

TrainConfig short_run(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch = 4;
  c.lr_steps = {1};
  return c;
}

}  // namespace

TEST_CASE("label rank breaks ties by class index") {
  const std::vector<real> z{1, 3, 3, 0, 3};
  CHECK(label_rank(z, 1) == 0);
  CHECK(label_rank(z, 2) == 1);
  CHECK(label_rank(z, 4) == 2);
  CHECK(label_rank(z, 0) == 3);
  CHECK(label_rank(z, 3) == 4);
  CHECK_THROWS_AS(label_rank(z, 5), ShapeError);
}

TEST_CASE("evaluate on a constant classifier") {
  const Dataset d = tiny_data();
  NetParams p = NetParams::create(named_spec("tinycan-baseline"), 1);
  std::fill(p.fc_weight.value.begin(), p.fc_weight.value.end(), real(0));
  // class 2 always wins, class 0 second, the rest tie at the bottom
  p.fc_bias.value = {1, 0, 2, 0, 0};
  const EvalResult r = evaluate(p, d, all_indices(d));
  CHECK(r.count == 20);
  CHECK(r.top1 == 0.2);
  CHECK(r.top5 == 1.0);
  for (std::size_t k : r.predictions) CHECK(k == 2);
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + 3.0);
  const double expect = (5 * lse * 4 - 4 * (1 + 0 + 2 + 0 + 0)) / 20;
  CHECK(r.loss == doctest::Approx(expect).epsilon(1e-12));
  CHECK(evaluate(p, d, std::vector<std::size_t>{}).count == 0);
}

TEST_CASE("a class-count or clip-shape mismatch is a ConfigError") {
  Dataset d = tiny_data(1);
  const NetParams p = NetParams::create(named_spec("tinycan"), 1);
  d.classes = 6;
  CHECK_THROWS_AS(evaluate(p, d, all_indices(d)), ConfigError);
  SynthConfig c;
  c.clips_per_class = 1;
  c.frames = 4;
  const Dataset short_clips = generate(c);
  CHECK_THROWS_AS(evaluate(p, short_clips, all_indices(short_clips)), ConfigError);
}

TEST_CASE("learning rate zero leaves every weight unchanged") {
  const Dataset d = tiny_data();
  NetParams p = NetParams::create(named_spec("tinycan"), 2);
  const NetParams before = p;
  TrainConfig c = short_run(1);
  c.lr = 0;
  train(p, d, split_indices(d.clips.size(), 0.8, 7), c);
  const std::vector<const Param*> a = before.params();
  const std::vector<Param*> b = p.params();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
}

TEST_CASE("schedule steps the rate at the configured epochs") {
  TrainConfig c;
  CHECK(c.lr_at(0) == 0.01);
  CHECK(c.lr_at(19) == 0.01);
  CHECK(c.lr_at(20) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(c.lr_at(25) == doctest::Approx(0.0001).epsilon(1e-15));
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("training is bit-reproducible and independent of the thread count") {
  const Dataset d = tiny_data();
  const Split s = split_indices(d.clips.size(), 0.8, 7);
  NetParams a = NetParams::create(named_spec("tinycan"), 3), b = a, c = a;
  TrainConfig cfg = short_run();
  const TrainResult ra = train(a, d, s, cfg), rb = train(b, d, s, cfg);
  cfg.threads = 3;
  const TrainResult rc = train(c, d, s, cfg);
  REQUIRE(ra.history.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(ra.history[e].train_loss == rb.history[e].train_loss);
    CHECK(ra.history[e].train_loss == rc.history[e].train_loss);
    CHECK(ra.history[e].val_top1 == rc.history[e].val_top1);
  }
  const auto pa = a.params(), pb = b.params(), pc = c.params();
  bool moved = false;
  const NetParams fresh = NetParams::create(named_spec("tinycan"), 3);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value == pb[i]->value);
    CHECK(pa[i]->value == pc[i]->value);
    moved = moved || pa[i]->value != fresh.params()[i]->value;
  }
  CHECK(moved);
}

TEST_CASE("best weights are kept from the first epoch reaching the maximum") {
  const Dataset d = tiny_data();
  NetParams p = NetParams::create(named_spec("tinycan-baseline"), 4);
  std::vector<double> seen;
  std::size_t improvements = 0;
  const TrainResult r = train(p, d, split_indices(d.clips.size(), 0.8, 7), short_run(3),
                              [&](const EpochMetrics& m, const NetParams&, bool improved) {
                                seen.push_back(m.val_top1);
                                improvements += improved;
                              });
  REQUIRE(seen.size() == 3);
  const auto best = std::max_element(seen.begin(), seen.end());
  CHECK(r.best_epoch == std::size_t(best - seen.begin()) + 1);
  CHECK(r.best_val_top1 == *best);
  CHECK(improvements >= 1);
  CHECK(evaluate(r.best, d, split_indices(d.clips.size(), 0.8, 7).val).top1 == *best);
}

TEST_CASE("a non-finite loss stops training and names the step") {
  const Dataset d = tiny_data();
  NetParams p = NetParams::create(named_spec("tinycan"), 5);
  p.fc_bias.value[0] = std::numeric_limits<real>::infinity();
  try {
    train(p, d, split_indices(d.clips.size(), 0.8, 7), short_run());
    FAIL("trained through an infinite logit");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}
