#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "senscal/em.hpp"
#include "senscal/model.hpp"

namespace senscal {

// 2N-row dataset where every subject appears once with u=1 (weight w1) and
// once with u=0 (weight 1-w1); the per-subject weight pair sums to 1. Rows
// are subject-major with the u=1 row first.
struct ExpandedDataset {
  Eigen::MatrixXd x;  // covariates, dataset column order
  Eigen::VectorXd u;
  Eigen::VectorXd z;
  Eigen::VectorXd y;
  Eigen::VectorXd weight;
  std::vector<int> set_index;
  std::vector<std::string> covariate_names;
  std::string treatment_name = "z";

  int n_rows() const { return static_cast<int>(weight.size()); }
  // Resolves "U", the treatment name, or a covariate name to a column.
  Eigen::VectorXd column(const std::string& variable) const;
};

ExpandedDataset expand_weighted(const MatchedDataset& ds, const FitResult& fit,
                                const std::string& treatment_name = "z");

enum class ImportanceMethod { pratt, dominance, generalized_dominance };

struct ImportanceTable {
  ImportanceMethod method = ImportanceMethod::pratt;
  struct Entry {
    std::string variable;
    double contribution = 0.0;  // d_j (Pratt) or average R^2 increase (dominance)
    double share = 0.0;         // contribution / total
  };
  std::vector<Entry> entries;  // sorted descending by contribution
  double total = 0.0;          // full-model (pseudo-)R^2
  std::vector<std::string> excluded_subsets;  // generalized dominance only
};

// Pratt decomposition d_j = b_j * rho_j of the weighted regression of y on
// the listed variables (standardized coefficient times weighted marginal
// correlation); the d_j sum to the weighted R^2. No set fixed effects here.
ImportanceTable pratt_importance(const ExpandedDataset& ex,
                                 const std::vector<std::string>& outcome_vars);

// General dominance: average increase in weighted R^2 from adding a variable,
// averaged over subset sizes across all 2^k subset models.
ImportanceTable dominance_analysis(const ExpandedDataset& ex,
                                   const std::vector<std::string>& outcome_vars);

// Same subset scheme on weighted logistic regressions of z, with McFadden
// pseudo-R^2 in place of R^2. U enters as a regular regressor, no offset.
ImportanceTable generalized_dominance_propensity(const ExpandedDataset& ex,
                                                 const std::vector<std::string>& propensity_vars);

void write_importance_csv(const ImportanceTable& table, std::ostream& out);

}  // namespace senscal
