#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "senscal/em.hpp"
#include "senscal/model.hpp"

namespace senscal {

struct IntervalEstimate {
  double beta_hat = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double level = 0.95;
  int n_boot = 0;
  int n_failed = 0;
};

struct BootstrapConfig {
  int n_boot = 500;
  double level = 0.95;
  std::uint64_t seed = 0;
  int jobs = 1;
  EmOptions em;
};

// Test seam: returns the set indices making up one resample.
using BlockDraw = std::function<std::vector<int>(int replicate, int n_sets)>;

// Percentile bootstrap CI for beta: resamples whole matched sets with
// replacement (sets are the blocks), refits by EM on each resample, and takes
// type-7 quantiles of the replicate estimates. Replicates draw from RNG
// substream (seed, replicate index) and may be evaluated in parallel; the
// reduction is ordered by replicate index. Replicates that error or fail to
// converge are dropped and counted; more than 5% failures is an error.
IntervalEstimate block_bootstrap_ci(const MatchedDataset& ds, const SensitivityParams& sp,
                                    const BootstrapConfig& cfg,
                                    const BlockDraw* draw = nullptr,
                                    FitResult* full_fit_out = nullptr);

// 0 on the interval boundary counts as covered, hence not significant.
bool is_significant(const IntervalEstimate& est);

// Type-7 (linear interpolation) quantile of already-sorted values.
double quantile_type7(const std::vector<double>& sorted, double q);

enum class BoundaryStatus { interior, at_grid_max, never_significant, failed };

const char* boundary_status_name(BoundaryStatus s);

struct BoundaryPoint {
  double lambda = 0.0;
  double delta_star = 0.0;
  BoundaryStatus status = BoundaryStatus::never_significant;
  ModelParams fit_snapshot;
  IntervalEstimate interval;  // bootstrap interval at (lambda, delta_star)
  std::string error;          // filled when status == failed
};

struct BoundaryConfig {
  double delta_max = 0.0;    // <= 0 means 4 * SD(y)
  double tol_delta = 0.0;    // <= 0 means 0.01 * SD(y)
  BootstrapConfig boot;
};

// For each lambda, binary-searches the largest delta keeping the treatment
// effect significant at the configured level. Each lambda gets a fixed
// bootstrap seed substream, reused across its delta evaluations. A failing
// grid point is reported with status failed, not thrown.
std::vector<BoundaryPoint> boundary_search(const MatchedDataset& ds, double p,
                                           const std::vector<double>& lambda_grid,
                                           const BoundaryConfig& cfg);

// lambda, delta_star, status, beta_hat, ci_low, ci_high plus one kappa_ and
// one psi_ column per covariate (psi_ empty for pruned covariates).
void write_boundary_csv(const std::vector<BoundaryPoint>& points, const MatchedDataset& ds,
                        std::ostream& out);

}  // namespace senscal
