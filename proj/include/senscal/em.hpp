#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "senscal/model.hpp"

namespace senscal {

// w1[l] = P(U_l = 1 | x_l, y_l, z_l; gamma), the E-step posterior.
struct PosteriorWeights {
  Eigen::VectorXd w1;
};

struct FitResult {
  ModelParams params;
  PosteriorWeights weights;
  std::vector<double> loglik_trace;  // observed-data log-likelihood per iteration
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> pruned_covariates;
};

struct EmOptions {
  double tol = 1e-6;   // absolute change in observed log-likelihood
  int max_iter = 1000;
};

// Posterior probability that the hypothesized confounder equals 1 for one
// subject, given current parameters. Evaluated in log space: the Gaussian
// density ratio underflows otherwise once |r|/sigma grows.
double posterior_weight(const MatchedDataset& ds, int subject, const ModelParams& gamma,
                        const SensitivityParams& sp);

// Covariate indices kept in the outcome model: pooled within-set variance of
// at least 1e-10. Exactly matched covariates are collinear with the set
// effects and get pruned (they stay in the propensity model).
std::vector<int> outcome_covariate_indices(const MatchedDataset& ds);

struct OutcomeMStep {
  Eigen::VectorXd psi;
  Eigen::VectorXd set_effects;
  double beta = 0.0;
  double sigma = 0.0;
};

// Maximizes Q1, the weighted Gaussian complete-data log-likelihood, as
// weighted least squares on the 2N-row expanded dataset with delta*u as a
// fixed offset. Set effects are absorbed by weighted within-set demeaning.
// sigma^2 uses the MLE denominator N (the total weight).
OutcomeMStep m_step_outcome(const MatchedDataset& ds, const Eigen::VectorXd& w1,
                            const SensitivityParams& sp, const std::vector<int>& outcome_idx);

struct TreatmentMStep {
  double kappa0 = 0.0;
  Eigen::VectorXd kappa;
};

// Maximizes Q2, the weighted Bernoulli log-likelihood with lambda*u as a
// fixed offset, by iteratively reweighted least squares to gradient norm
// below 1e-8. init, when given, warm-starts the iteration.
TreatmentMStep m_step_treatment(const MatchedDataset& ds, const Eigen::VectorXd& w1,
                                const SensitivityParams& sp,
                                const TreatmentMStep* init = nullptr);

// Observed-data log-likelihood: the U-mixture marginal, via log-sum-exp.
double observed_loglik(const MatchedDataset& ds, const ModelParams& gamma,
                       const SensitivityParams& sp);

// Maximum likelihood for fixed sensitivity parameters by EM with U treated
// as a missing binary covariate. Deterministic given (ds, sp, init).
FitResult em_fit(const MatchedDataset& ds, const SensitivityParams& sp,
                 const std::optional<ModelParams>& init = std::nullopt,
                 const EmOptions& opts = {});

nlohmann::ordered_json fit_result_to_json(const FitResult& fit, const MatchedDataset& ds);

}  // namespace senscal
