#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "can/autograd.hpp"

namespace can {

// A differentiable computation from one input tensor to one output tensor.
using DifferentiableBlock = std::function<Var(Tape&, Var)>;

struct FdOptions {
  real epsilon = real(1e-5);
  std::uint64_t seed = 1;
  // Coordinates sampled per bundle; bundles no larger than this are checked exhaustively.
  std::size_t coords_per_bundle = 64;
  bool check_input = true;
  // A probe that changes any relu sign or max selection has crossed a kink. With one side
  // clean the coordinate uses a one-sided difference towards it; with both sides kinked
  // (no derivative to compare) it is replaced by another coordinate of the same bundle.
  bool skip_kinks = true;
};

struct FdBundleResult {
  std::string name;
  std::size_t checked = 0;
  std::size_t one_sided = 0;  // checked with a one-sided difference
  std::size_t straddled = 0;  // replaced because both probes crossed a kink
  real max_rel_error = 0;     // +inf if every candidate straddled a kink
};

struct FdReport {
  real max_rel_error = 0;
  std::vector<FdBundleResult> bundles;
};

// Compares the tape's analytic gradient of L = <P, f(x)> (P a seeded random
// projection) against central differences (L(θ+ε) - L(θ-ε)) / 2ε for the input
// and every parameter bundle. Error per coordinate is |a - fd| / max(1, |a|).
// Bundles no larger than coords_per_bundle are checked exhaustively.
// Requires 64-bit reals and ε in [1e-7, 1e-3]; throws NumericError on a non-finite loss.
FdReport fd_check(const DifferentiableBlock& f, const VideoTensor& x, std::span<Param* const> params,
                  const FdOptions& options = {});

}  // namespace can
