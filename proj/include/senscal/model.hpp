#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

#include "senscal/errors.hpp"

namespace senscal {

// Sensitivity parameters (p, lambda, delta) indexing the hypothesized
// confounder: U ~ Bern(p), shifting treatment log-odds by lambda and the
// outcome mean by delta. Fixed during fitting, never estimated.
struct SensitivityParams {
  double p = 0.5;
  double lambda = 0.0;
  double delta = 0.0;

  void validate() const;
};

struct CovariateMeta {
  std::string name;
  bool binary = false;
  // Standardization record: stored_value = (original - orig_mean) * (0.5 / orig_sd).
  // The defaults encode the identity transform.
  double orig_mean = 0.0;
  double orig_sd = 0.5;
  bool standardized = false;
};

// Back-transformation of outcome/propensity coefficients between the
// standardized scale (mean 0, SD 0.5) and the covariate's original scale.
double coef_to_original_scale(double standardized_coef, const CovariateMeta& meta);
double coef_to_standardized_scale(double original_coef, const CovariateMeta& meta);

struct Subject {
  std::string subject_id;
  std::string set_id;
  Eigen::VectorXd x;
  int z = 0;
  double y = 0.0;
};

// Immutable matched dataset: subjects with covariates, binary treatment,
// continuous outcome, and matched-set labels. Safe to share across threads.
class MatchedDataset {
 public:
  enum class SetValidation {
    full,          // every set needs >= 2 members and both arms
    pre_matching,  // candidate sets from a simulator, before full matching
  };

  enum class FlagPolicy {
    detect,  // mark columns whose values are exactly {0,1} as binary
    keep,    // trust the flags passed in
  };

  MatchedDataset() = default;

  static MatchedDataset from_subjects(const std::vector<Subject>& subjects,
                                      std::vector<CovariateMeta> covariates,
                                      SetValidation validation = SetValidation::full,
                                      FlagPolicy flags = FlagPolicy::detect);

  int n_subjects() const { return static_cast<int>(y_.size()); }
  int n_sets() const { return static_cast<int>(set_ids_.size()); }
  int n_covariates() const { return static_cast<int>(covariates_.size()); }

  const Eigen::MatrixXd& x() const { return x_; }
  const Eigen::VectorXd& y() const { return y_; }
  const Eigen::VectorXi& z() const { return z_; }
  const std::vector<int>& set_index() const { return set_index_; }
  const std::vector<std::vector<int>>& set_members() const { return set_members_; }
  const std::vector<std::string>& set_ids() const { return set_ids_; }
  const std::vector<std::string>& subject_ids() const { return subject_ids_; }
  const std::vector<CovariateMeta>& covariates() const { return covariates_; }
  std::vector<std::string> covariate_names() const;

  Subject subject(int i) const;

  // New dataset made of the given sets (with repetition); each resampled
  // block keeps its members intact and receives a fresh set id "b<k>".
  MatchedDataset resample_sets(const std::vector<int>& set_indices) const;

  // Same subjects regrouped into new sets; groups[i] holds subject indices.
  MatchedDataset regroup(const std::vector<std::vector<int>>& groups,
                         const std::vector<std::string>& group_ids,
                         SetValidation validation = SetValidation::full) const;

  double outcome_sd() const;  // sample SD of y, N-1 denominator

 private:
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  Eigen::VectorXi z_;
  std::vector<int> set_index_;
  std::vector<std::vector<int>> set_members_;
  std::vector<std::string> set_ids_;
  std::vector<std::string> subject_ids_;
  std::vector<CovariateMeta> covariates_;
};

// Column-role map for CSV ingestion. Any column not claimed by a role is a
// covariate. force_binary/force_continuous override auto-detection.
struct Schema {
  std::string outcome = "y";
  std::string treatment = "z";
  std::string set = "set";
  std::vector<std::string> force_binary;
  std::vector<std::string> force_continuous;
};

MatchedDataset load_dataset(std::istream& in, const Schema& schema = {});
MatchedDataset load_dataset_file(const std::string& path, const Schema& schema = {});
void serialize_dataset(const MatchedDataset& ds, std::ostream& out, const Schema& schema = {});

// Rescales every continuous covariate to pooled mean 0 and sample SD 0.5
// (N-1 denominator); binary covariates are left intact. The original
// (mean, SD) pair is recorded in covariate_meta, composing with any earlier
// standardization so repeated application is the identity.
MatchedDataset standardize(const MatchedDataset& ds);

// gamma = (kappa0, kappa, psi, {a_i}, sigma, beta): propensity coefficients,
// outcome coefficients on the non-pruned covariates, matched-set fixed
// effects, residual SD, and the treatment effect.
struct ModelParams {
  double kappa0 = 0.0;
  Eigen::VectorXd kappa;
  Eigen::VectorXd psi;
  std::vector<int> outcome_cov_idx;  // covariate indices psi refers to
  Eigen::VectorXd set_effects;       // aligned with MatchedDataset set order
  double sigma = 1.0;
  double beta = 0.0;
};

std::string format_double(double v);  // shortest round-trip decimal form

}  // namespace senscal
