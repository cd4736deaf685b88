#include "can/fd_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace can {

namespace {

struct Probe {
  VideoTensor out;
  std::uint64_t kinks = 0;
};

Probe run_block(const DifferentiableBlock& f, const VideoTensor& x) {
  Tape tape;
  const Var out = f(tape, tape.leaf(x, false));
  return Probe{tape.value(out), tape.kink_signature()};
}

// <P, up - down>: differencing elementwise before projecting avoids cancelling two large sums.
real projected_difference(const VideoTensor& up, const VideoTensor& down, const VideoTensor& projection) {
  require_same_dims(up.dims(), projection.dims(), "fd_check output");
  real sum = 0;
  for (std::size_t i = 0; i < up.size(); ++i) sum += projection.data()[i] * (up.data()[i] - down.data()[i]);
  if (!std::isfinite(sum) || !up.all_finite() || !down.all_finite()) {
    throw NumericError("fd_check: non-finite loss");
  }
  return sum;
}

// Central difference over one storage vector, restoring it afterwards. Coordinates are
// visited in a seeded order until `coords_per_bundle` of them have been checked.
FdBundleResult check_bundle(const std::string& name, std::vector<real>& storage, std::span<const real> analytic,
                            const std::function<Probe()>& eval, const Probe& base,
                            const VideoTensor& projection, const FdOptions& opt, Rng& rng) {
  FdBundleResult r{name, 0, 0, 0, 0};
  std::vector<std::size_t> order(storage.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::shuffle(order.begin(), order.end(), rng);
  // Give up on a bundle after this many kinked candidates; it then reports +inf if nothing was checked.
  const std::size_t max_straddled = 8 * opt.coords_per_bundle;
  for (std::size_t i : order) {
    if (r.checked == opt.coords_per_bundle || r.straddled == max_straddled) break;
    const real saved = storage[i];
    storage[i] = saved + opt.epsilon;
    const Probe up = eval();
    storage[i] = saved - opt.epsilon;
    const Probe down = eval();
    storage[i] = saved;
    const bool up_smooth = up.kinks == base.kinks, down_smooth = down.kinks == base.kinks;
    real numeric = 0;
    if (!opt.skip_kinks || (up_smooth && down_smooth)) {
      numeric = projected_difference(up.out, down.out, projection) / (real(2) * opt.epsilon);
    } else if (up_smooth || down_smooth) {
      // the kink lies on one side only: difference towards the smooth side
      numeric = up_smooth ? projected_difference(up.out, base.out, projection) / opt.epsilon
                          : projected_difference(base.out, down.out, projection) / opt.epsilon;
      ++r.one_sided;
    } else {
      ++r.straddled;
      continue;
    }
    const real a = analytic.empty() ? real(0) : analytic[i];
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / std::max(real(1), std::abs(a)));
    ++r.checked;
  }
  if (r.checked == 0 && !storage.empty()) r.max_rel_error = std::numeric_limits<real>::infinity();
  return r;
}

}  // namespace

FdReport fd_check(const DifferentiableBlock& f, const VideoTensor& x, std::span<Param* const> params,
                  const FdOptions& opt) {
  if constexpr (sizeof(real) != 8) {
    throw StateError("fd_check: requires a 64-bit build");
  }
  if (!(opt.epsilon >= real(1e-7) && opt.epsilon <= real(1e-3))) {
    throw std::invalid_argument("fd_check: epsilon must lie in [1e-7, 1e-3]");
  }
  Rng rng(opt.seed);

  Tape tape;
  const Var in = tape.leaf(x, true);
  const Var out = f(tape, in);
  VideoTensor projection(tape.value(out).dims());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (real& v : projection.data()) v = real(normal(rng));
  tape.backward(out, projection);
  const Probe base{tape.value(out), tape.kink_signature()};

  FdReport report;
  std::vector<real> probe_storage(x.data().begin(), x.data().end());
  auto eval_probe = [&] { return run_block(f, VideoTensor(x.dims(), probe_storage)); };

  if (opt.check_input) {
    const VideoTensor gx = tape.grad(in);
    report.bundles.push_back(
        check_bundle("input", probe_storage, gx.data(), eval_probe, base, projection, opt, rng));
  }
  for (Param* p : params) {
    auto eval = [&] { return run_block(f, x); };
    report.bundles.push_back(
        check_bundle(p->name, p->value, tape.param_grad(*p), eval, base, projection, opt, rng));
  }
  for (const auto& b : report.bundles) report.max_rel_error = std::max(report.max_rel_error, b.max_rel_error);
  return report;
}

}  // namespace can
