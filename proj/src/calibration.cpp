#include "senscal/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace senscal {

namespace {

constexpr int kMaxDominanceVars = 20;

double log_expit(double t) {
  if (t >= 0.0) return -std::log1p(std::exp(-t));
  return t - std::log1p(std::exp(t));
}

double expit(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  double e = std::exp(t);
  return e / (1.0 + e);
}

Eigen::MatrixXd variable_matrix(const ExpandedDataset& ex, const std::vector<std::string>& vars) {
  Eigen::MatrixXd m(ex.n_rows(), static_cast<Eigen::Index>(vars.size()));
  for (std::size_t j = 0; j < vars.size(); ++j)
    m.col(static_cast<Eigen::Index>(j)) = ex.column(vars[j]);
  return m;
}

struct WeightedMoments {
  Eigen::MatrixXd cov_xx;  // weighted covariance of the variables
  Eigen::VectorXd cov_xy;
  double var_y = 0.0;
  Eigen::VectorXd mean_x;
  double mean_y = 0.0;
  double total_weight = 0.0;
};

// Weight-frequency semantics: weights act as fractional row counts.
WeightedMoments weighted_moments(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                 const Eigen::VectorXd& w) {
  WeightedMoments m;
  m.total_weight = w.sum();
  m.mean_x = x.transpose() * w / m.total_weight;
  m.mean_y = y.dot(w) / m.total_weight;
  Eigen::MatrixXd xc = x.rowwise() - m.mean_x.transpose();
  Eigen::VectorXd yc = y.array() - m.mean_y;
  m.cov_xx = xc.transpose() * w.asDiagonal() * xc / m.total_weight;
  m.cov_xy = xc.transpose() * (w.asDiagonal() * yc) / m.total_weight;
  m.var_y = yc.dot(w.asDiagonal() * yc) / m.total_weight;
  return m;
}

void check_variable_variance(const WeightedMoments& m, const std::vector<std::string>& vars) {
  double scale = std::max(1e-300, m.cov_xx.diagonal().maxCoeff());
  for (std::size_t j = 0; j < vars.size(); ++j)
    if (m.cov_xx(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) <= 1e-14 * scale)
      throw Error(ErrorCode::rank_deficient, "variable " + vars[j] + " has zero weighted variance");
}

// R^2 of the weighted regression of y on the masked subset of variables,
// via the weighted covariance matrix. A pseudo-inverse handles collinear
// subsets (duplicated variables), for which R^2 is still well defined.
double subset_r_squared(const WeightedMoments& m, std::uint32_t mask,
                        const std::vector<int>& positions) {
  int s = 0;
  for (int j : positions)
    if (mask & (1u << j)) ++s;
  if (s == 0) return 0.0;

  Eigen::MatrixXd css(s, s);
  Eigen::VectorXd csy(s);
  int a = 0;
  for (int j : positions) {
    if (!(mask & (1u << j))) continue;
    int b = 0;
    for (int l : positions) {
      if (!(mask & (1u << l))) continue;
      css(a, b) = m.cov_xx(j, l);
      ++b;
    }
    csy[a] = m.cov_xy[j];
    ++a;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(css);
  const auto& vals = eig.eigenvalues();
  double cutoff = 1e-12 * std::max(vals.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd t = eig.eigenvectors().transpose() * csy;
  double explained = 0.0;
  for (int e = 0; e < s; ++e)
    if (vals[e] > cutoff) explained += t[e] * t[e] / vals[e];
  return explained / m.var_y;
}

// General-dominance averaging over the per-mask score table.
std::vector<double> general_dominance(const std::vector<double>& score, int k,
                                      const std::vector<char>& valid) {
  std::vector<double> contribution(k, 0.0);
  for (int j = 0; j < k; ++j) {
    std::vector<double> sum_by_size(k, 0.0);
    std::vector<double> count_by_size(k, 0.0);
    const std::uint32_t bit = 1u << j;
    const std::uint32_t n_masks = 1u << k;
    for (std::uint32_t mask = 0; mask < n_masks; ++mask) {
      if (mask & bit) continue;
      if (!valid[mask] || !valid[mask | bit]) continue;
      int size = __builtin_popcount(mask);
      sum_by_size[size] += score[mask | bit] - score[mask];
      count_by_size[size] += 1.0;
    }
    double avg = 0.0;
    for (int s = 0; s < k; ++s)
      if (count_by_size[s] > 0.0) avg += sum_by_size[s] / count_by_size[s];
    contribution[j] = avg / k;
  }
  return contribution;
}

ImportanceTable build_table(ImportanceMethod method, const std::vector<std::string>& vars,
                            const std::vector<double>& contribution, double total) {
  ImportanceTable table;
  table.method = method;
  table.total = total;
  for (std::size_t j = 0; j < vars.size(); ++j)
    table.entries.push_back({vars[j], contribution[j], total != 0.0 ? contribution[j] / total : 0.0});
  std::stable_sort(table.entries.begin(), table.entries.end(),
                   [](const auto& a, const auto& b) { return a.contribution > b.contribution; });
  return table;
}

// Weighted logistic regression of z on [1, x]; returns maximized
// log-likelihood. Mirrors the EM treatment M-step solver, without offsets.
double weighted_logistic_loglik(const Eigen::MatrixXd& x, const Eigen::VectorXd& z,
                                const Eigen::VectorXd& w) {
  const int n = static_cast<int>(z.size());
  const int d = static_cast<int>(x.cols()) + 1;
  Eigen::VectorXd coef = Eigen::VectorXd::Zero(d);

  auto loglik = [&](const Eigen::VectorXd& c) {
    double ll = 0.0;
    for (int i = 0; i < n; ++i) {
      if (w[i] == 0.0) continue;
      double eta = c[0];
      for (int j = 1; j < d; ++j) eta += c[j] * x(i, j - 1);
      ll += w[i] * log_expit((z[i] == 1.0 ? 1.0 : -1.0) * eta);
    }
    return ll;
  };

  Eigen::VectorXd grad(d), xt(d);
  Eigen::MatrixXd hess(d, d);
  double cur = loglik(coef);
  for (int iter = 0; iter < 100; ++iter) {
    grad.setZero();
    hess.setZero();
    for (int i = 0; i < n; ++i) {
      if (w[i] == 0.0) continue;
      xt[0] = 1.0;
      for (int j = 1; j < d; ++j) xt[j] = x(i, j - 1);
      double mu = expit(coef.dot(xt));
      grad.noalias() += w[i] * (z[i] - mu) * xt;
      hess.selfadjointView<Eigen::Lower>().rankUpdate(xt, w[i] * mu * (1.0 - mu));
    }
    if (grad.cwiseAbs().maxCoeff() < 1e-8) return cur;

    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess.selfadjointView<Eigen::Lower>());
    Eigen::VectorXd delta = ldlt.solve(grad);
    if (!delta.allFinite())
      throw Error(ErrorCode::singular_information, "weighted information matrix is singular");
    const double slack = 1e-12 * (1.0 + std::fabs(cur));
    double step = 1.0;
    Eigen::VectorXd proposal;
    double next;
    for (int half = 0;; ++half) {
      proposal = coef + step * delta;
      next = loglik(proposal);
      if (next >= cur - slack || half >= 40) break;
      step *= 0.5;
    }
    coef = proposal;
    cur = next;
    if (coef.cwiseAbs().maxCoeff() > 30.0)
      throw Error(ErrorCode::separation, "logistic subset fit separated");
  }
  throw Error(ErrorCode::not_converged, "logistic subset fit did not converge");
}

}  // namespace

Eigen::VectorXd ExpandedDataset::column(const std::string& variable) const {
  if (variable == "U") return u;
  if (variable == treatment_name) return z;
  for (std::size_t j = 0; j < covariate_names.size(); ++j)
    if (covariate_names[j] == variable) return x.col(static_cast<Eigen::Index>(j));
  throw Error(ErrorCode::missing_column, "variable '" + variable + "'");
}

ExpandedDataset expand_weighted(const MatchedDataset& ds, const FitResult& fit,
                                const std::string& treatment_name) {
  if (!fit.converged)
    throw Error(ErrorCode::not_converged, "expand_weighted needs a converged fit");
  if (fit.weights.w1.size() != ds.n_subjects())
    throw Error(ErrorCode::invalid_config, "posterior weights do not match dataset");

  const int n = ds.n_subjects();
  ExpandedDataset ex;
  ex.x.resize(2 * n, ds.n_covariates());
  ex.u.resize(2 * n);
  ex.z.resize(2 * n);
  ex.y.resize(2 * n);
  ex.weight.resize(2 * n);
  ex.set_index.resize(2 * n);
  ex.covariate_names = ds.covariate_names();
  ex.treatment_name = treatment_name;

  for (int i = 0; i < n; ++i) {
    for (int r = 0; r < 2; ++r) {
      int row = 2 * i + r;
      ex.x.row(row) = ds.x().row(i);
      ex.u[row] = r == 0 ? 1.0 : 0.0;
      ex.z[row] = ds.z()[i];
      ex.y[row] = ds.y()[i];
      ex.weight[row] = r == 0 ? fit.weights.w1[i] : 1.0 - fit.weights.w1[i];
      ex.set_index[row] = ds.set_index()[i];
    }
  }
  return ex;
}

ImportanceTable pratt_importance(const ExpandedDataset& ex,
                                 const std::vector<std::string>& outcome_vars) {
  if (outcome_vars.empty()) throw Error(ErrorCode::invalid_config, "no variables given");
  const int k = static_cast<int>(outcome_vars.size());
  Eigen::MatrixXd x = variable_matrix(ex, outcome_vars);
  WeightedMoments m = weighted_moments(x, ex.y, ex.weight);
  check_variable_variance(m, outcome_vars);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m.cov_xx);
  double cutoff = 1e-10 * eig.eigenvalues().cwiseAbs().maxCoeff();
  if (eig.eigenvalues().minCoeff() <= cutoff)
    throw Error(ErrorCode::rank_deficient, "weighted design is rank deficient");
  Eigen::VectorXd b = eig.eigenvectors() *
                      (eig.eigenvectors().transpose() * m.cov_xy).cwiseQuotient(eig.eigenvalues());

  // R^2 from weighted residuals, independently of the d_j identity.
  Eigen::VectorXd fitted_c = (x.rowwise() - m.mean_x.transpose()) * b;
  Eigen::VectorXd resid = (ex.y.array() - m.mean_y) - fitted_c.array();
  double rss = resid.dot(ex.weight.asDiagonal() * resid);
  double r2 = 1.0 - rss / (m.var_y * m.total_weight);

  double sd_y = std::sqrt(m.var_y);
  std::vector<double> d(k);
  for (int j = 0; j < k; ++j) {
    double sd_j = std::sqrt(m.cov_xx(j, j));
    double b_std = b[j] * sd_j / sd_y;
    double rho = m.cov_xy[j] / (sd_j * sd_y);
    d[j] = b_std * rho;
  }
  return build_table(ImportanceMethod::pratt, outcome_vars, d, r2);
}

ImportanceTable dominance_analysis(const ExpandedDataset& ex,
                                   const std::vector<std::string>& outcome_vars) {
  const int k = static_cast<int>(outcome_vars.size());
  if (k == 0) throw Error(ErrorCode::invalid_config, "no variables given");
  if (k > kMaxDominanceVars)
    throw Error(ErrorCode::too_many_variables,
                std::to_string(k) + " variables exceeds the cap of " +
                    std::to_string(kMaxDominanceVars));

  Eigen::MatrixXd x = variable_matrix(ex, outcome_vars);
  WeightedMoments m = weighted_moments(x, ex.y, ex.weight);
  check_variable_variance(m, outcome_vars);

  std::vector<int> positions(k);
  for (int j = 0; j < k; ++j) positions[j] = j;
  const std::uint32_t n_masks = 1u << k;
  std::vector<double> r2(n_masks);
  for (std::uint32_t mask = 0; mask < n_masks; ++mask)
    r2[mask] = subset_r_squared(m, mask, positions);

  std::vector<char> valid(n_masks, 1);
  std::vector<double> contribution = general_dominance(r2, k, valid);
  return build_table(ImportanceMethod::dominance, outcome_vars, contribution, r2[n_masks - 1]);
}

ImportanceTable generalized_dominance_propensity(const ExpandedDataset& ex,
                                                 const std::vector<std::string>& propensity_vars) {
  const int k = static_cast<int>(propensity_vars.size());
  if (k == 0) throw Error(ErrorCode::invalid_config, "no variables given");
  if (k > kMaxDominanceVars)
    throw Error(ErrorCode::too_many_variables,
                std::to_string(k) + " variables exceeds the cap of " +
                    std::to_string(kMaxDominanceVars));

  Eigen::MatrixXd x = variable_matrix(ex, propensity_vars);
  {
    WeightedMoments m = weighted_moments(x, ex.z, ex.weight);
    check_variable_variance(m, propensity_vars);
  }

  double w_total = ex.weight.sum();
  double pbar = ex.z.dot(ex.weight) / w_total;
  if (pbar <= 0.0 || pbar >= 1.0)
    throw Error(ErrorCode::invalid_config, "treatment indicator is constant");
  double ll_null = w_total * (pbar * std::log(pbar) + (1.0 - pbar) * std::log1p(-pbar));

  const std::uint32_t n_masks = 1u << k;
  std::vector<double> pseudo_r2(n_masks, 0.0);
  std::vector<char> valid(n_masks, 1);
  ImportanceTable table;
  for (std::uint32_t mask = 1; mask < n_masks; ++mask) {
    int s = __builtin_popcount(mask);
    Eigen::MatrixXd xs(ex.n_rows(), s);
    int c = 0;
    for (int j = 0; j < k; ++j)
      if (mask & (1u << j)) xs.col(c++) = x.col(j);
    try {
      double ll = weighted_logistic_loglik(xs, ex.z, ex.weight);
      pseudo_r2[mask] = 1.0 - ll / ll_null;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::separation) throw;
      valid[mask] = 0;
      std::string names;
      for (int j = 0; j < k; ++j)
        if (mask & (1u << j)) names += (names.empty() ? "" : "+") + propensity_vars[j];
      table.excluded_subsets.push_back(names);
    }
  }
  if (!valid[n_masks - 1])
    throw Error(ErrorCode::separation, "full propensity model separated");

  std::vector<double> contribution = general_dominance(pseudo_r2, k, valid);
  ImportanceTable built = build_table(ImportanceMethod::generalized_dominance, propensity_vars,
                                      contribution, pseudo_r2[n_masks - 1]);
  built.excluded_subsets = std::move(table.excluded_subsets);
  return built;
}

void write_importance_csv(const ImportanceTable& table, std::ostream& out) {
  out << "variable,contribution,share\n";
  for (const auto& e : table.entries)
    out << e.variable << ',' << format_double(e.contribution) << ',' << format_double(e.share)
        << '\n';
}

}  // namespace senscal
