#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "senscal/inference.hpp"
#include "senscal/model.hpp"

namespace senscal {

enum class ResponseModel { linear, nonlinear };

struct ErrorModel {
  enum class Kind { normal, student_t, laplace };
  Kind kind = Kind::normal;
  double param = 1.5;  // sigma for normal, df for student_t, rate for laplace

  void validate() const;
};

struct DgpConfig {
  int n_strata = 100;
  int stratum_size = 10;
  ResponseModel response = ResponseModel::linear;
  ErrorModel error;
  double beta = 2.0;
  double lambda_true = 0.0;
  double delta_true = 0.0;
  double p_true = 0.5;
  double jitter_half_width = 0.0;  // uniform[-w, w] per covariate; 0 = none
  std::uint64_t seed = 0;

  void validate() const;
};

// Stratum-level covariate distribution: 7 independent normals.
const std::array<double, 7>& covariate_means();
const std::array<double, 7>& covariate_sds();

// The treatment-assignment and response surfaces of the study designs,
// exposed for direct evaluation in tests.
double propensity_linear_predictor(const Eigen::VectorXd& x);
double linear_response_mean(const Eigen::VectorXd& x);
double nonlinear_response_mean(const Eigen::VectorXd& x);

// Draws a dataset with strata as candidate sets (pre-matching: a stratum may
// lack one arm). Covariates are stratum-level, optionally jittered per
// subject; U ~ Bern(p_true) per subject; Z and Y follow the configured
// surfaces with +lambda_true*U and +delta_true*U. Deterministic given seed.
MatchedDataset simulate_dataset(const DgpConfig& cfg);

// Greedy full matching on the estimated propensity score (plain logistic fit
// on the observed covariates): every control attaches to its nearest treated
// subject, and treated subjects left alone join their nearest control's set.
// With keep_strata, intact strata pass through as matched sets and only
// single-arm or singleton strata are merged into the nearest set by mean
// score.
MatchedDataset full_match(const MatchedDataset& ds, bool keep_strata);

struct StudyConfig {
  int n_reps = 500;
  int n_boot = 500;
  double level = 0.95;
  std::uint64_t seed = 0;
  int jobs = 1;
  EmOptions em;
};

struct StudyReport {
  int n_reps = 0;
  double coverage = 0.0;  // CI at the true (p, lambda, delta) covering beta
  struct PowerCell {
    SensitivityParams sp;
    double power = 0.0;
    int n_failed = 0;
  };
  std::vector<PowerCell> power_by_params;
  double mean_beta_hat = 0.0;  // at the true sensitivity parameters
  double mc_se = 0.0;
  int n_failed_truth = 0;
};

// Per replicate: simulate, match, standardize, then bootstrap CIs at the true
// parameters (for coverage) and every grid point (for power). Replicates run
// in parallel with per-replicate RNG substreams; results reduce by replicate
// index.
StudyReport run_study(const DgpConfig& cfg, const std::vector<SensitivityParams>& params_grid,
                      const StudyConfig& study);

nlohmann::ordered_json study_report_to_json(const StudyReport& report);
void write_power_csv(const StudyReport& report, std::ostream& out);

struct Preset {
  std::string name;
  DgpConfig cfg;
  std::vector<SensitivityParams> grid;
};

const std::vector<Preset>& study_presets();
const Preset* find_preset(const std::string& name);

}  // namespace senscal
