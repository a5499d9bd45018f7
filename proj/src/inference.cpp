#include "senscal/inference.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>

#include "senscal/parallel.hpp"
#include "senscal/rng.hpp"

namespace senscal {

double quantile_type7(const std::vector<double>& sorted, double q) {
  const int n = static_cast<int>(sorted.size());
  if (n == 0) throw Error(ErrorCode::invalid_config, "quantile of empty sample");
  if (n == 1) return sorted[0];
  double h = (n - 1) * q;
  int lo = static_cast<int>(std::floor(h));
  lo = std::clamp(lo, 0, n - 2);
  double frac = h - lo;
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

bool is_significant(const IntervalEstimate& est) {
  return est.ci_low > 0.0 || est.ci_high < 0.0;
}

IntervalEstimate block_bootstrap_ci(const MatchedDataset& ds, const SensitivityParams& sp,
                                    const BootstrapConfig& cfg, const BlockDraw* draw,
                                    FitResult* full_fit_out) {
  if (cfg.n_boot < 2) throw Error(ErrorCode::invalid_config, "n_boot must be at least 2");
  if (!(cfg.level > 0.0 && cfg.level < 1.0))
    throw Error(ErrorCode::invalid_config, "level must lie in (0,1)");

  FitResult full = em_fit(ds, sp, std::nullopt, cfg.em);
  if (!full.converged)
    throw Error(ErrorCode::not_converged, "EM did not converge on the full data");

  const int n_sets = ds.n_sets();
  std::vector<std::optional<double>> replicate_beta(cfg.n_boot);

  parallel_for(cfg.jobs, cfg.n_boot, [&](int r) {
    std::vector<int> blocks;
    if (draw) {
      blocks = (*draw)(r, n_sets);
    } else {
      RngStream rng(cfg.seed, {stream::bootstrap, static_cast<std::uint64_t>(r)});
      blocks.resize(n_sets);
      for (int b = 0; b < n_sets; ++b)
        blocks[b] = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_sets)));
    }
    MatchedDataset resampled = ds.resample_sets(blocks);

    // Warm start from the full-data fit; duplicated blocks inherit the fixed
    // effect of their source set.
    ModelParams init = full.params;
    Eigen::VectorXd effects(static_cast<Eigen::Index>(blocks.size()));
    for (std::size_t b = 0; b < blocks.size(); ++b)
      effects[static_cast<Eigen::Index>(b)] = full.params.set_effects[blocks[b]];
    init.set_effects = std::move(effects);

    try {
      FitResult fit = em_fit(resampled, sp, init, cfg.em);
      if (fit.converged) replicate_beta[r] = fit.params.beta;
    } catch (const Error& e) {
      if (is_input_error(e.code())) throw;  // resamples of valid data stay valid
    }
  });

  std::vector<double> betas;
  betas.reserve(cfg.n_boot);
  for (const auto& b : replicate_beta)
    if (b) betas.push_back(*b);
  int n_failed = cfg.n_boot - static_cast<int>(betas.size());
  if (n_failed > 0.05 * cfg.n_boot)
    throw Error(ErrorCode::too_many_failures,
                std::to_string(n_failed) + " of " + std::to_string(cfg.n_boot) +
                    " bootstrap replicates failed");

  std::sort(betas.begin(), betas.end());
  double alpha = 1.0 - cfg.level;
  IntervalEstimate est;
  est.beta_hat = full.params.beta;
  est.ci_low = quantile_type7(betas, alpha / 2.0);
  est.ci_high = quantile_type7(betas, 1.0 - alpha / 2.0);
  est.level = cfg.level;
  est.n_boot = cfg.n_boot;
  est.n_failed = n_failed;
  if (full_fit_out) *full_fit_out = std::move(full);
  return est;
}

const char* boundary_status_name(BoundaryStatus s) {
  switch (s) {
    case BoundaryStatus::interior: return "interior";
    case BoundaryStatus::at_grid_max: return "at_grid_max";
    case BoundaryStatus::never_significant: return "never_significant";
    case BoundaryStatus::failed: return "failed";
  }
  return "unknown";
}

std::vector<BoundaryPoint> boundary_search(const MatchedDataset& ds, double p,
                                           const std::vector<double>& lambda_grid,
                                           const BoundaryConfig& cfg) {
  if (lambda_grid.empty()) throw Error(ErrorCode::invalid_config, "lambda grid is empty");
  double sd_y = ds.outcome_sd();
  double delta_max = cfg.delta_max > 0.0 ? cfg.delta_max : 4.0 * sd_y;
  double tol_delta = cfg.tol_delta > 0.0 ? cfg.tol_delta : 0.01 * sd_y;
  if (!(delta_max >= 0.0) || !(tol_delta > 0.0))
    throw Error(ErrorCode::invalid_config, "delta_max must be >= 0 and tol_delta > 0");

  std::vector<BoundaryPoint> points(lambda_grid.size());
  for (std::size_t j = 0; j < lambda_grid.size(); ++j) {
    BoundaryPoint& pt = points[j];
    pt.lambda = lambda_grid[j];

    // One fixed seed per lambda, shared by every delta evaluation along the
    // search, so a rerun reproduces the same boundary.
    BootstrapConfig boot = cfg.boot;
    {
      std::uint64_t s = cfg.boot.seed;
      (void)splitmix64_next(s);
      s ^= stream::boundary + (s << 6);
      s += static_cast<std::uint64_t>(j) * 0x9e3779b97f4a7c15ULL;
      boot.seed = splitmix64_next(s);
    }

    struct Eval {
      IntervalEstimate interval;
      FitResult fit;
    };
    auto evaluate = [&](double delta) {
      Eval e;
      SensitivityParams sp{p, pt.lambda, delta};
      e.interval = block_bootstrap_ci(ds, sp, boot, nullptr, &e.fit);
      return e;
    };

    try {
      Eval at_zero = evaluate(0.0);
      if (!is_significant(at_zero.interval)) {
        pt.status = BoundaryStatus::never_significant;
        pt.delta_star = 0.0;
        pt.interval = at_zero.interval;
        pt.fit_snapshot = at_zero.fit.params;
        continue;
      }
      Eval at_max = delta_max == 0.0 ? std::move(at_zero) : evaluate(delta_max);
      if (is_significant(at_max.interval)) {
        pt.status = BoundaryStatus::at_grid_max;
        pt.delta_star = delta_max;
        pt.interval = at_max.interval;
        pt.fit_snapshot = at_max.fit.params;
        continue;
      }

      double lo = 0.0, hi = delta_max;
      Eval best = std::move(at_zero);
      while (hi - lo >= tol_delta) {
        double mid = 0.5 * (lo + hi);
        Eval e = evaluate(mid);
        if (is_significant(e.interval)) {
          lo = mid;
          best = std::move(e);
        } else {
          hi = mid;
        }
      }
      pt.status = BoundaryStatus::interior;
      pt.delta_star = lo;
      pt.interval = best.interval;
      pt.fit_snapshot = best.fit.params;
    } catch (const Error& e) {
      pt.status = BoundaryStatus::failed;
      pt.error = e.what();
    }
  }
  return points;
}

void write_boundary_csv(const std::vector<BoundaryPoint>& points, const MatchedDataset& ds,
                        std::ostream& out) {
  out << "lambda,delta_star,status,beta_hat,ci_low,ci_high";
  for (const auto& c : ds.covariates()) out << ",kappa_" << c.name;
  for (const auto& c : ds.covariates()) out << ",psi_" << c.name;
  out << '\n';
  for (const auto& pt : points) {
    out << format_double(pt.lambda) << ',';
    if (pt.status == BoundaryStatus::failed) {
      out << ",failed,,,";
      for (int c = 0; c < 2 * ds.n_covariates(); ++c) out << ',';
      out << '\n';
      continue;
    }
    out << format_double(pt.delta_star) << ',' << boundary_status_name(pt.status) << ','
        << format_double(pt.interval.beta_hat) << ',' << format_double(pt.interval.ci_low) << ','
        << format_double(pt.interval.ci_high);
    for (int c = 0; c < ds.n_covariates(); ++c) out << ',' << format_double(pt.fit_snapshot.kappa[c]);
    for (int c = 0; c < ds.n_covariates(); ++c) {
      out << ',';
      const auto& idx = pt.fit_snapshot.outcome_cov_idx;
      auto it = std::find(idx.begin(), idx.end(), c);
      if (it != idx.end())
        out << format_double(pt.fit_snapshot.psi[static_cast<Eigen::Index>(it - idx.begin())]);
    }
    out << '\n';
  }
}

}  // namespace senscal
