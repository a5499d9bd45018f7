#include "senscal/em.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace senscal {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kSigmaFloor = 1e-10;
constexpr double kSeparationBound = 30.0;
constexpr double kIrlsGradTol = 1e-8;
constexpr int kIrlsMaxIter = 200;

double log_expit(double t) {
  if (t >= 0.0) return -std::log1p(std::exp(-t));
  return t - std::log1p(std::exp(t));
}

double expit(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  double e = std::exp(t);
  return e / (1.0 + e);
}

double log_sum_exp(double a, double b) {
  double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x, const std::vector<int>& idx) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = x.col(idx[j]);
  return out;
}

void check_gamma(const MatchedDataset& ds, const ModelParams& gamma) {
  if (gamma.kappa.size() != ds.n_covariates())
    throw Error(ErrorCode::invalid_config, "kappa has wrong length");
  if (gamma.psi.size() != static_cast<Eigen::Index>(gamma.outcome_cov_idx.size()))
    throw Error(ErrorCode::invalid_config, "psi does not match outcome_cov_idx");
  if (gamma.set_effects.size() != ds.n_sets())
    throw Error(ErrorCode::invalid_config, "set_effects does not cover every set");
  if (!(gamma.sigma > 0.0)) throw Error(ErrorCode::invalid_config, "sigma must be positive");
}

// Shared posterior computation given the propensity logit and the u=1
// residual r (so y - a - psi'x - delta - beta*z for treated, without beta for
// controls). Returns P(U=1 | data).
double posterior_from_parts(double eta, double r, int z, const SensitivityParams& sp,
                            double sigma) {
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  double lz1, lz0;
  if (z == 1) {
    lz1 = log_expit(eta + sp.lambda);
    lz0 = log_expit(eta);
  } else {
    lz1 = log_expit(-eta - sp.lambda);
    lz0 = log_expit(-eta);
  }
  double l1 = std::log(sp.p) + lz1 - r * r * inv2s2;
  double r0 = r + sp.delta;
  double l0 = std::log1p(-sp.p) + lz0 - r0 * r0 * inv2s2;
  return std::exp(l1 - log_sum_exp(l1, l0));
}

}  // namespace

double posterior_weight(const MatchedDataset& ds, int subject, const ModelParams& gamma,
                        const SensitivityParams& sp) {
  sp.validate();
  check_gamma(ds, gamma);
  double eta = gamma.kappa0 + gamma.kappa.dot(ds.x().row(subject));
  double mean_obs = gamma.set_effects[ds.set_index()[subject]];
  for (std::size_t j = 0; j < gamma.outcome_cov_idx.size(); ++j)
    mean_obs += gamma.psi[static_cast<Eigen::Index>(j)] * ds.x()(subject, gamma.outcome_cov_idx[j]);
  double r = ds.y()[subject] - mean_obs - sp.delta - gamma.beta * ds.z()[subject];
  return posterior_from_parts(eta, r, ds.z()[subject], sp, gamma.sigma);
}

namespace {

Eigen::VectorXd demean_within_sets(const MatchedDataset& ds, const Eigen::VectorXd& col) {
  Eigen::VectorXd out = col;
  for (const auto& members : ds.set_members()) {
    double mean = 0.0;
    for (int i : members) mean += col[i];
    mean /= static_cast<double>(members.size());
    for (int i : members) out[i] -= mean;
  }
  return out;
}

}  // namespace

std::vector<int> outcome_covariate_indices(const MatchedDataset& ds) {
  std::vector<int> keep;
  const int n = ds.n_subjects();

  // Treatment-first sequential rank selection on the demeaned columns. Under
  // exact matching the covariate contrasts inside a merged set all follow
  // the one between-strata direction, so covariates can be collinear with
  // the set effects jointly even when each passes the variance rule alone.
  std::vector<Eigen::VectorXd> basis;
  {
    Eigen::VectorXd zd = demean_within_sets(ds, ds.z().cast<double>());
    double norm = zd.norm();
    if (norm > 1e-12) basis.push_back(zd / norm);
  }

  for (int j = 0; j < ds.n_covariates(); ++j) {
    Eigen::VectorXd xd = demean_within_sets(ds, ds.x().col(j));
    double ssw = xd.squaredNorm();
    if (ssw / n < 1e-10) continue;  // constant within every set
    Eigen::VectorXd resid = xd;
    for (const auto& b : basis) resid -= b.dot(resid) * b;
    if (resid.norm() <= 1e-10 * std::sqrt(ssw)) continue;  // aliased
    basis.push_back(resid / resid.norm());
    keep.push_back(j);
  }
  return keep;
}

OutcomeMStep m_step_outcome(const MatchedDataset& ds, const Eigen::VectorXd& w1,
                            const SensitivityParams& sp, const std::vector<int>& outcome_idx) {
  const int n = ds.n_subjects();
  const int n_sets = ds.n_sets();
  const int kp = static_cast<int>(outcome_idx.size());
  if (w1.size() != n) throw Error(ErrorCode::invalid_config, "weights have wrong length");

  // The two expanded rows of a subject share the design, so the weighted
  // normal equations collapse to one row with response y - delta*w1; only
  // sigma^2 needs the within-pair spread correction delta^2*w1*(1-w1).
  Eigen::VectorXd y_star = ds.y() - sp.delta * w1;
  Eigen::MatrixXd x_out = select_columns(ds.x(), outcome_idx);

  Eigen::VectorXd set_mean_y = Eigen::VectorXd::Zero(n_sets);
  Eigen::VectorXd set_mean_z = Eigen::VectorXd::Zero(n_sets);
  Eigen::MatrixXd set_mean_x = Eigen::MatrixXd::Zero(n_sets, kp);
  for (int s = 0; s < n_sets; ++s) {
    const auto& members = ds.set_members()[s];
    for (int i : members) {
      set_mean_y[s] += y_star[i];
      set_mean_z[s] += ds.z()[i];
      set_mean_x.row(s) += x_out.row(i);
    }
    double inv = 1.0 / static_cast<double>(members.size());
    set_mean_y[s] *= inv;
    set_mean_z[s] *= inv;
    set_mean_x.row(s) *= inv;
  }

  Eigen::MatrixXd design(n, kp + 1);
  Eigen::VectorXd response(n);
  for (int i = 0; i < n; ++i) {
    int s = ds.set_index()[i];
    design.block(i, 0, 1, kp) = x_out.row(i) - set_mean_x.row(s);
    design(i, kp) = ds.z()[i] - set_mean_z[s];
    response[i] = y_star[i] - set_mean_y[s];
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < kp + 1) {
    const auto& perm = qr.colsPermutation().indices();
    std::string names;
    for (int c = qr.rank(); c < kp + 1; ++c) {
      if (!names.empty()) names += ", ";
      int col = perm[c];
      names += col == kp ? "treatment" : ds.covariates()[outcome_idx[col]].name;
    }
    throw Error(ErrorCode::rank_deficient, names + " collinear with set effects");
  }
  Eigen::VectorXd coef = qr.solve(response);

  OutcomeMStep fit;
  fit.psi = coef.head(kp);
  fit.beta = coef[kp];
  fit.set_effects = set_mean_y - set_mean_x * fit.psi - fit.beta * set_mean_z;
  double rss = (response - design * coef).squaredNorm() +
               sp.delta * sp.delta * (w1.array() * (1.0 - w1.array())).sum();
  fit.sigma = std::sqrt(rss / n);
  return fit;
}

namespace {

// Q2 at the given coefficients; both expanded rows of a subject evaluated
// with their own offset.
double q2_value(const MatchedDataset& ds, const Eigen::VectorXd& w1, double lambda,
                const Eigen::VectorXd& coef) {
  const int n = ds.n_subjects();
  double q = 0.0;
  for (int i = 0; i < n; ++i) {
    double eta = coef[0];
    for (int j = 0; j < ds.n_covariates(); ++j) eta += coef[j + 1] * ds.x()(i, j);
    double sign = ds.z()[i] == 1 ? 1.0 : -1.0;
    double wa = w1[i], wb = 1.0 - w1[i];
    if (wa > 0.0) q += wa * log_expit(sign * (eta + lambda));
    if (wb > 0.0) q += wb * log_expit(sign * eta);
  }
  return q;
}

}  // namespace

TreatmentMStep m_step_treatment(const MatchedDataset& ds, const Eigen::VectorXd& w1,
                                const SensitivityParams& sp, const TreatmentMStep* init) {
  const int n = ds.n_subjects();
  const int d = ds.n_covariates() + 1;
  if (w1.size() != n) throw Error(ErrorCode::invalid_config, "weights have wrong length");

  Eigen::VectorXd coef = Eigen::VectorXd::Zero(d);
  if (init) {
    coef[0] = init->kappa0;
    coef.tail(d - 1) = init->kappa;
  }

  Eigen::VectorXd grad(d), xt(d), delta(d);
  Eigen::MatrixXd hess(d, d);
  double q_cur = q2_value(ds, w1, sp.lambda, coef);

  for (int iter = 0; iter < kIrlsMaxIter; ++iter) {
    grad.setZero();
    hess.setZero();
    for (int i = 0; i < n; ++i) {
      xt[0] = 1.0;
      for (int j = 1; j < d; ++j) xt[j] = ds.x()(i, j - 1);
      double eta = coef.dot(xt);
      double mu1 = expit(eta + sp.lambda);
      double mu0 = expit(eta);
      double wa = w1[i], wb = 1.0 - w1[i];
      double z = ds.z()[i];
      double g = wa * (z - mu1) + wb * (z - mu0);
      double h = wa * mu1 * (1.0 - mu1) + wb * mu0 * (1.0 - mu0);
      grad.noalias() += g * xt;
      hess.selfadjointView<Eigen::Lower>().rankUpdate(xt, h);
    }
    if (grad.cwiseAbs().maxCoeff() < kIrlsGradTol) {
      TreatmentMStep fit;
      fit.kappa0 = coef[0];
      fit.kappa = coef.tail(d - 1);
      return fit;
    }

    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess.selfadjointView<Eigen::Lower>());
    delta = ldlt.solve(grad);
    if (!delta.allFinite() ||
        (hess.selfadjointView<Eigen::Lower>() * delta - grad).cwiseAbs().maxCoeff() >
            1e-6 * (1.0 + grad.cwiseAbs().maxCoeff()))
      throw Error(ErrorCode::singular_information, "weighted information matrix is singular");

    // Newton with step halving; Q2 is concave so an ascent step exists. The
    // slack keeps the check from stalling on evaluation noise once the
    // improvement falls below the resolution of Q2.
    const double slack = 1e-12 * (1.0 + std::fabs(q_cur));
    double step = 1.0;
    Eigen::VectorXd proposal;
    double q_new;
    for (int half = 0;; ++half) {
      proposal = coef + step * delta;
      q_new = q2_value(ds, w1, sp.lambda, proposal);
      if (q_new >= q_cur - slack || half >= 40) break;
      step *= 0.5;
    }
    coef = proposal;
    q_cur = q_new;

    if (coef.cwiseAbs().maxCoeff() > kSeparationBound)
      throw Error(ErrorCode::separation,
                  "propensity coefficients diverged beyond " + format_double(kSeparationBound));
  }
  throw Error(ErrorCode::not_converged, "IRLS did not reach gradient tolerance");
}

double observed_loglik(const MatchedDataset& ds, const ModelParams& gamma,
                       const SensitivityParams& sp) {
  sp.validate();
  check_gamma(ds, gamma);
  const int n = ds.n_subjects();
  const double inv2s2 = 1.0 / (2.0 * gamma.sigma * gamma.sigma);
  const double log_p = std::log(sp.p);
  const double log_q = std::log1p(-sp.p);

  Eigen::VectorXd eta = Eigen::VectorXd::Constant(n, gamma.kappa0);
  eta.noalias() += ds.x() * gamma.kappa;
  Eigen::VectorXd mean0(n);
  for (int i = 0; i < n; ++i) {
    double m = gamma.set_effects[ds.set_index()[i]] + gamma.beta * ds.z()[i];
    for (std::size_t j = 0; j < gamma.outcome_cov_idx.size(); ++j)
      m += gamma.psi[static_cast<Eigen::Index>(j)] * ds.x()(i, gamma.outcome_cov_idx[j]);
    mean0[i] = m;
  }

  double ll = 0.0;
  for (int i = 0; i < n; ++i) {
    double r0 = ds.y()[i] - mean0[i];
    double r1 = r0 - sp.delta;
    double sign = ds.z()[i] == 1 ? 1.0 : -1.0;
    double l1 = log_p + log_expit(sign * (eta[i] + sp.lambda)) - r1 * r1 * inv2s2;
    double l0 = log_q + log_expit(sign * eta[i]) - r0 * r0 * inv2s2;
    ll += log_sum_exp(l1, l0);
  }
  ll -= n * (std::log(gamma.sigma) + 0.5 * std::log(kTwoPi));
  return ll;
}

namespace {

void e_step(const MatchedDataset& ds, const ModelParams& gamma, const SensitivityParams& sp,
            Eigen::VectorXd& w1) {
  const int n = ds.n_subjects();
  w1.resize(n);
  Eigen::VectorXd eta = Eigen::VectorXd::Constant(n, gamma.kappa0);
  eta.noalias() += ds.x() * gamma.kappa;
  for (int i = 0; i < n; ++i) {
    double mean_obs = gamma.set_effects[ds.set_index()[i]];
    for (std::size_t j = 0; j < gamma.outcome_cov_idx.size(); ++j)
      mean_obs += gamma.psi[static_cast<Eigen::Index>(j)] * ds.x()(i, gamma.outcome_cov_idx[j]);
    double r = ds.y()[i] - mean_obs - sp.delta - gamma.beta * ds.z()[i];
    w1[i] = posterior_from_parts(eta[i], r, ds.z()[i], sp, gamma.sigma);
  }
}

ModelParams adapt_init(const MatchedDataset& ds, const ModelParams& init,
                       const std::vector<int>& outcome_idx) {
  ModelParams g;
  if (init.kappa.size() != ds.n_covariates())
    throw Error(ErrorCode::invalid_config, "init kappa has wrong length");
  if (init.set_effects.size() != ds.n_sets())
    throw Error(ErrorCode::invalid_config, "init set_effects does not cover every set");
  g.kappa0 = init.kappa0;
  g.kappa = init.kappa;
  g.beta = init.beta;
  g.sigma = std::max(init.sigma, kSigmaFloor);
  g.set_effects = init.set_effects;
  g.outcome_cov_idx = outcome_idx;
  g.psi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(outcome_idx.size()));
  for (std::size_t j = 0; j < outcome_idx.size(); ++j) {
    auto it = std::find(init.outcome_cov_idx.begin(), init.outcome_cov_idx.end(), outcome_idx[j]);
    if (it != init.outcome_cov_idx.end())
      g.psi[static_cast<Eigen::Index>(j)] =
          init.psi[static_cast<Eigen::Index>(it - init.outcome_cov_idx.begin())];
  }
  return g;
}

}  // namespace

FitResult em_fit(const MatchedDataset& ds, const SensitivityParams& sp,
                 const std::optional<ModelParams>& init, const EmOptions& opts) {
  sp.validate();
  if (!(opts.tol > 0.0)) throw Error(ErrorCode::invalid_config, "tol must be positive");
  if (opts.max_iter < 1) throw Error(ErrorCode::invalid_config, "max_iter must be at least 1");

  FitResult fit;
  std::vector<int> outcome_idx = outcome_covariate_indices(ds);
  {
    std::vector<bool> kept(ds.n_covariates(), false);
    for (int j : outcome_idx) kept[j] = true;
    for (int j = 0; j < ds.n_covariates(); ++j)
      if (!kept[j]) fit.pruned_covariates.push_back(ds.covariates()[j].name);
  }

  ModelParams gamma;
  if (init) {
    gamma = adapt_init(ds, *init, outcome_idx);
  } else {
    // One M-step at w1 = 0 is the plain fixed-effects OLS plus the plain
    // logistic fit that ignore U.
    Eigen::VectorXd w0 = Eigen::VectorXd::Zero(ds.n_subjects());
    OutcomeMStep of = m_step_outcome(ds, w0, sp, outcome_idx);
    TreatmentMStep tf = m_step_treatment(ds, w0, sp);
    gamma.kappa0 = tf.kappa0;
    gamma.kappa = tf.kappa;
    gamma.psi = of.psi;
    gamma.outcome_cov_idx = outcome_idx;
    gamma.set_effects = of.set_effects;
    gamma.beta = of.beta;
    gamma.sigma = std::max(of.sigma, kSigmaFloor);
  }

  fit.loglik_trace.push_back(observed_loglik(ds, gamma, sp));
  Eigen::VectorXd w1;
  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    e_step(ds, gamma, sp, w1);

    TreatmentMStep warm{gamma.kappa0, gamma.kappa};
    TreatmentMStep tf = m_step_treatment(ds, w1, sp, &warm);
    OutcomeMStep of = m_step_outcome(ds, w1, sp, outcome_idx);
    gamma.kappa0 = tf.kappa0;
    gamma.kappa = tf.kappa;
    gamma.psi = of.psi;
    gamma.set_effects = of.set_effects;
    gamma.beta = of.beta;
    gamma.sigma = std::max(of.sigma, kSigmaFloor);

    double ll = observed_loglik(ds, gamma, sp);
    double prev = fit.loglik_trace.back();
    fit.loglik_trace.push_back(ll);
    fit.iterations = iter;
    if (std::fabs(ll - prev) < opts.tol) {
      fit.converged = true;
      break;
    }
  }

  e_step(ds, gamma, sp, w1);  // weights at the returned parameters
  fit.params = std::move(gamma);
  fit.weights.w1 = std::move(w1);
  return fit;
}

nlohmann::ordered_json fit_result_to_json(const FitResult& fit, const MatchedDataset& ds) {
  nlohmann::ordered_json j;
  j["beta"] = fit.params.beta;
  j["sigma"] = fit.params.sigma;
  j["kappa0"] = fit.params.kappa0;
  nlohmann::ordered_json kappa;
  for (int c = 0; c < ds.n_covariates(); ++c)
    kappa[ds.covariates()[c].name] = fit.params.kappa[c];
  j["kappa"] = std::move(kappa);
  nlohmann::ordered_json psi;
  for (std::size_t c = 0; c < fit.params.outcome_cov_idx.size(); ++c)
    psi[ds.covariates()[fit.params.outcome_cov_idx[c]].name] =
        fit.params.psi[static_cast<Eigen::Index>(c)];
  j["psi"] = std::move(psi);
  nlohmann::ordered_json effects;
  for (int s = 0; s < ds.n_sets(); ++s) effects[ds.set_ids()[s]] = fit.params.set_effects[s];
  j["set_effects"] = std::move(effects);
  j["loglik_trace"] = fit.loglik_trace;
  j["iterations"] = fit.iterations;
  j["converged"] = fit.converged;
  j["pruned_covariates"] = fit.pruned_covariates;
  return j;
}

}  // namespace senscal
