#pragma once

// Pearson chi-squared independence test on the class x position tables of the
// synthetic trajectories. Shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <cstddef>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "can/data.hpp"

namespace can::stats {

struct ChiSquared {
  double statistic = 0;
  double dof = 0;
  double p = 1;
};

// counts[row][col]; rows and columns with zero totals are dropped from the degrees of freedom.
inline ChiSquared independence(const std::vector<std::vector<double>>& counts) {
  const std::size_t rows = counts.size(), cols = counts.front().size();
  std::vector<double> row_sum(rows, 0), col_sum(cols, 0);
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      row_sum[r] += counts[r][c];
      col_sum[c] += counts[r][c];
      total += counts[r][c];
    }
  ChiSquared out;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = row_sum[r] * col_sum[c] / total;
      if (e > 0) out.statistic += (counts[r][c] - e) * (counts[r][c] - e) / e;
    }
  const auto live = [](const std::vector<double>& v) {
    return double(std::count_if(v.begin(), v.end(), [](double x) { return x > 0; }));
  };
  out.dof = (live(row_sum) - 1) * (live(col_sum) - 1);
  out.p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(out.dof), out.statistic));
  return out;
}

struct PositionTest {
  std::size_t tables = 0;
  double min_p = 1;        // smallest per-table p-value
  double family_p = 1;     // Bonferroni: min(1, tables * min_p)
};

// One table per (frame, dot, axis): rows are classes, columns are pixel coordinates.
// Each clip contributes exactly one count per table, so the counts are independent draws.
inline PositionTest position_independence(const std::vector<Trajectory>& trajectories, const SynthConfig& cfg) {
  PositionTest out;
  for (std::size_t t = 0; t < cfg.frames; ++t)
    for (std::size_t dot = 0; dot < 2; ++dot)
      for (std::size_t axis = 0; axis < 2; ++axis) {
        const std::size_t extent = axis == 0 ? cfg.width : cfg.height;
        std::vector<std::vector<double>> counts(kMotionClasses, std::vector<double>(extent, 0));
        for (const Trajectory& tr : trajectories) counts[tr.label][tr.positions[t][dot][axis]] += 1;
        out.min_p = std::min(out.min_p, independence(counts).p);
        ++out.tables;
      }
  out.family_p = std::min(1.0, double(out.tables) * out.min_p);
  return out;
}

}  // namespace can::stats
