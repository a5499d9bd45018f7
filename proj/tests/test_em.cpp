#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "support.hpp"

using namespace senscal;
using test::Row;
using test::make_dataset;

namespace {

ModelParams simple_gamma(const MatchedDataset& ds, double kappa0, double beta, double sigma) {
  ModelParams g;
  g.kappa0 = kappa0;
  g.kappa = Eigen::VectorXd::Zero(ds.n_covariates());
  g.outcome_cov_idx.clear();
  g.psi = Eigen::VectorXd(0);
  g.set_effects = Eigen::VectorXd::Zero(ds.n_sets());
  g.beta = beta;
  g.sigma = sigma;
  return g;
}

// Q1 from its definition, for finite-difference gradient checks.
double q1_direct(const MatchedDataset& ds, const Eigen::VectorXd& w1, double delta,
                 const std::vector<int>& idx, const Eigen::VectorXd& psi,
                 const Eigen::VectorXd& a, double beta, double sigma) {
  double q = 0.0;
  for (int i = 0; i < ds.n_subjects(); ++i) {
    for (int u = 0; u <= 1; ++u) {
      double w = u == 1 ? w1[i] : 1.0 - w1[i];
      double mean = a[ds.set_index()[i]] + delta * u + beta * ds.z()[i];
      for (std::size_t j = 0; j < idx.size(); ++j)
        mean += psi[static_cast<Eigen::Index>(j)] * ds.x()(i, idx[j]);
      double r = ds.y()[i] - mean;
      q += w * (-std::log(sigma) - 0.5 * std::log(2.0 * 3.14159265358979323846) -
                r * r / (2.0 * sigma * sigma));
    }
  }
  return q;
}

}  // namespace

TEST_CASE("posterior weight identities") {
  auto ds = test::random_instance(11, 4, 2, 2);
  ModelParams g = em_fit(ds, {0.5, 0.0, 0.0}).params;

  SUBCASE("lambda=delta=0 returns the prior exactly") {
    for (double p : {0.1, 0.3, 0.5, 0.9}) {
      for (int i = 0; i < ds.n_subjects(); ++i)
        CHECK(posterior_weight(ds, i, g, {p, 0.0, 0.0}) == doctest::Approx(p).epsilon(1e-12));
    }
  }
  SUBCASE("degenerate priors") {
    for (int i = 0; i < ds.n_subjects(); ++i) {
      CHECK(posterior_weight(ds, i, g, {0.0, 1.0, 2.0}) == 0.0);
      CHECK(posterior_weight(ds, i, g, {1.0, 1.0, 2.0}) == 1.0);
    }
  }
}

TEST_CASE("posterior weight matches direct density arithmetic") {
  // z=1, eta=0, lambda=0, p=0.5, sigma=1, delta=1, r=0:
  // weight = phi(0) / (phi(0) + phi(1))
  auto ds = make_dataset({{"1", 1, 0.0, {}}, {"1", 0, 5.0, {}}});
  ModelParams g = simple_gamma(ds, 0.0, 0.0, 1.0);
  // y=0, a=0, beta=0 -> r = y - a - delta - beta*z = -1; choose y so r=0
  auto ds2 = make_dataset({{"1", 1, 1.0, {}}, {"1", 0, 5.0, {}}});
  double w = posterior_weight(ds2, 0, g, {0.5, 0.0, 1.0});
  double expected = oracle::normal_pdf(0.0) / (oracle::normal_pdf(0.0) + oracle::normal_pdf(1.0));
  CHECK(w == doctest::Approx(expected).epsilon(1e-10));
  CHECK(w == doctest::Approx(0.6225).epsilon(1e-3));

  SUBCASE("symmetric case gives exactly one half") {
    // r = -delta/2 so both residual densities match; lambda=0 balances the logits
    double delta = 2.0, sigma = 1.3;
    auto ds3 = make_dataset({{"1", 1, delta / 2.0, {}}, {"1", 0, 9.0, {}}});
    ModelParams g3 = simple_gamma(ds3, 0.7, 0.0, sigma);
    CHECK(posterior_weight(ds3, 0, g3, {0.5, 0.0, delta}) ==
          doctest::Approx(0.5).epsilon(1e-12));
  }

  SUBCASE("matches the full posterior formula on random subjects") {
    auto rds = test::random_instance(21, 3, 2, 2);
    ModelParams rg = em_fit(rds, {0.5, 0.0, 0.0}).params;
    SensitivityParams sp{0.35, 0.8, 1.4};
    for (int i = 0; i < rds.n_subjects(); ++i) {
      double eta = rg.kappa0 + rg.kappa.dot(rds.x().row(i));
      double mean = rg.set_effects[rds.set_index()[i]];
      for (std::size_t j = 0; j < rg.outcome_cov_idx.size(); ++j)
        mean += rg.psi[static_cast<Eigen::Index>(j)] * rds.x()(i, rg.outcome_cov_idx[j]);
      double r = rds.y()[i] - mean - sp.delta - rg.beta * rds.z()[i];
      double pz1 = rds.z()[i] == 1 ? oracle::expit(eta + sp.lambda)
                                   : 1.0 - oracle::expit(eta + sp.lambda);
      double pz0 = rds.z()[i] == 1 ? oracle::expit(eta) : 1.0 - oracle::expit(eta);
      double num = sp.p * pz1 * oracle::normal_pdf(r / rg.sigma);
      double den = num + (1.0 - sp.p) * pz0 * oracle::normal_pdf((r + sp.delta) / rg.sigma);
      CHECK(posterior_weight(rds, i, rg, sp) == doctest::Approx(num / den).epsilon(1e-10));
    }
  }
}

TEST_CASE("outcome M-step") {
  SUBCASE("zero weights reduce to fixed-effects least squares") {
    auto ds = test::random_instance(31, 4, 2, 2);
    Eigen::VectorXd w0 = Eigen::VectorXd::Zero(ds.n_subjects());
    auto idx = outcome_covariate_indices(ds);
    OutcomeMStep fit = m_step_outcome(ds, w0, {0.5, 3.0, 7.0}, idx);
    auto direct = oracle::expanded_wls(ds, w0, 7.0, idx);
    CHECK(fit.beta == doctest::Approx(direct.beta).epsilon(1e-8));
    for (int j = 0; j < fit.psi.size(); ++j)
      CHECK(fit.psi[j] == doctest::Approx(direct.psi[j]).epsilon(1e-8));
  }

  SUBCASE("two-subject set interpolates exactly") {
    auto ds = make_dataset({{"1", 0, 0.0, {}}, {"1", 1, 2.0, {}}});
    Eigen::VectorXd w0 = Eigen::VectorXd::Zero(2);
    OutcomeMStep fit = m_step_outcome(ds, w0, {0.5, 0.0, 0.0}, {});
    CHECK(fit.beta == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(fit.set_effects[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(fit.sigma == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("matches the dense expanded weighted normal equations") {
    for (std::uint64_t seed : {41u, 42u, 43u}) {
      auto ds = test::random_instance(seed, 3, 1, 1);
      Eigen::VectorXd w1 = test::random_weights(seed, ds.n_subjects());
      SensitivityParams sp{0.5, 1.0, 1.7};
      auto idx = outcome_covariate_indices(ds);
      OutcomeMStep fit = m_step_outcome(ds, w1, sp, idx);
      auto direct = oracle::expanded_wls(ds, w1, sp.delta, idx);
      CHECK(fit.beta == doctest::Approx(direct.beta).epsilon(1e-8));
      for (int j = 0; j < fit.psi.size(); ++j)
        CHECK(fit.psi[j] == doctest::Approx(direct.psi[j]).epsilon(1e-8));
      for (int s = 0; s < ds.n_sets(); ++s)
        CHECK(fit.set_effects[s] == doctest::Approx(direct.set_effects[s]).epsilon(1e-8));
      CHECK(fit.sigma == doctest::Approx(direct.sigma).epsilon(1e-8));
    }
  }

  SUBCASE("reports collinear columns") {
    // covariate identical to the treatment indicator
    auto ds = make_dataset({{"1", 1, 2.0, {1.0}},
                            {"1", 0, 1.0, {0.0}},
                            {"2", 1, 3.0, {1.0}},
                            {"2", 0, 1.5, {0.0}}},
                           {"copy_of_z"});
    Eigen::VectorXd w0 = Eigen::VectorXd::Zero(4);
    CHECK_THROWS_AS(m_step_outcome(ds, w0, {0.5, 0.0, 0.0}, {0}), Error);
  }
}

TEST_CASE("treatment M-step") {
  SUBCASE("intercept-only MLE is the empirical log odds") {
    std::vector<Row> rows;
    for (int i = 0; i < 10; ++i) rows.push_back({"s" + std::to_string(i / 5), i % 5 < 2, 0.0, {}});
    // 4 treated of 10
    auto ds = make_dataset(rows);
    Eigen::VectorXd w = test::random_weights(5, 10);
    TreatmentMStep fit = m_step_treatment(ds, w, {0.5, 0.0, 0.0});
    CHECK(fit.kappa0 == doctest::Approx(std::log(0.4 / 0.6)).epsilon(1e-8));
  }

  SUBCASE("half weights with lambda=0 equal the plain logistic fit") {
    auto ds = test::random_instance(51, 5, 2, 2);
    Eigen::VectorXd half = Eigen::VectorXd::Constant(ds.n_subjects(), 0.5);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(ds.n_subjects());
    TreatmentMStep a = m_step_treatment(ds, half, {0.5, 0.0, 0.0});
    TreatmentMStep b = m_step_treatment(ds, zero, {0.5, 0.0, 0.0});
    CHECK(a.kappa0 == doctest::Approx(b.kappa0).epsilon(1e-7));
    for (int j = 0; j < a.kappa.size(); ++j)
      CHECK(a.kappa[j] == doctest::Approx(b.kappa[j]).epsilon(1e-7));
  }

  SUBCASE("matches an independent maximization of Q2 with offsets") {
    auto ds = test::random_instance(61, 4, 2, 2);
    Eigen::VectorXd w1 = test::random_weights(61, ds.n_subjects());
    SensitivityParams sp{0.5, 1.3, 0.0};
    TreatmentMStep fit = m_step_treatment(ds, w1, sp);
    double k0 = 0.0;
    Eigen::VectorXd kappa = Eigen::VectorXd::Zero(ds.n_covariates());
    oracle::maximize_q2(ds, w1, sp.lambda, k0, kappa);
    CHECK(fit.kappa0 == doctest::Approx(k0).epsilon(1e-6));
    for (int j = 0; j < kappa.size(); ++j)
      CHECK(fit.kappa[j] == doctest::Approx(kappa[j]).epsilon(1e-6));
  }

  SUBCASE("perfect separation is reported") {
    // separated on a standardized-scale covariate, so the coefficient has to
    // pass the divergence bound before the saturated gradient dies out
    auto ds = make_dataset({{"1", 1, 1.0, {0.5}},
                            {"1", 0, 0.0, {-0.5}},
                            {"2", 1, 1.0, {0.6}},
                            {"2", 0, 0.0, {-0.6}}},
                           {"x"});
    Eigen::VectorXd w0 = Eigen::VectorXd::Zero(4);
    try {
      m_step_treatment(ds, w0, {0.5, 0.0, 0.0});
      FAIL("expected separation");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::separation);
    }
  }
}

TEST_CASE("observed log-likelihood") {
  SUBCASE("mixture collapses at lambda=delta=0") {
    auto ds = test::random_instance(71, 3, 2, 1);
    ModelParams g = em_fit(ds, {0.5, 0.0, 0.0}).params;
    for (double p : {0.2, 0.5, 0.8}) {
      double ll = observed_loglik(ds, g, {p, 0.0, 0.0});
      CHECK(ll == doctest::Approx(oracle::observed_loglik_direct(ds, g, {p, 0.0, 0.0}))
                      .epsilon(1e-12));
      // p plays no role once the mixture collapses
      CHECK(ll == doctest::Approx(observed_loglik(ds, g, {0.5, 0.0, 0.0})).epsilon(1e-12));
    }
  }

  SUBCASE("p=1 is the complete-data likelihood with U fixed at one") {
    auto ds = test::random_instance(72, 3, 2, 1);
    ModelParams g = em_fit(ds, {0.5, 0.0, 0.0}).params;
    SensitivityParams sp{1.0, 0.9, 1.1};
    double direct = 0.0;
    for (int i = 0; i < ds.n_subjects(); ++i) {
      double eta = g.kappa0 + g.kappa.dot(ds.x().row(i)) + sp.lambda;
      double pz = oracle::expit(eta);
      direct += ds.z()[i] == 1 ? std::log(pz) : std::log(1.0 - pz);
      double mean = g.set_effects[ds.set_index()[i]] + sp.delta + g.beta * ds.z()[i];
      for (std::size_t j = 0; j < g.outcome_cov_idx.size(); ++j)
        mean += g.psi[static_cast<Eigen::Index>(j)] * ds.x()(i, g.outcome_cov_idx[j]);
      direct += std::log(oracle::normal_pdf((ds.y()[i] - mean) / g.sigma) / g.sigma);
    }
    CHECK(observed_loglik(ds, g, sp) == doctest::Approx(direct).epsilon(1e-10));
  }

  SUBCASE("matches naive term-by-term summation") {
    for (std::uint64_t seed : {73u, 74u}) {
      auto ds = test::random_instance(seed, 4, 2, 2);
      ModelParams g = em_fit(ds, {0.5, 0.0, 0.0}).params;
      SensitivityParams sp{0.4, 1.2, 0.7};
      CHECK(observed_loglik(ds, g, sp) ==
            doctest::Approx(oracle::observed_loglik_direct(ds, g, sp)).epsilon(1e-10));
    }
  }
}

TEST_CASE("em_fit at lambda=delta=0 is the no-confounder fit") {
  auto ds = test::random_instance(81, 5, 3, 2);
  FitResult fit = em_fit(ds, {0.3, 0.0, 0.0});
  CHECK(fit.converged);
  CHECK(fit.iterations <= 2);

  auto idx = outcome_covariate_indices(ds);
  Eigen::VectorXd w0 = Eigen::VectorXd::Zero(ds.n_subjects());
  auto ols = oracle::expanded_wls(ds, w0, 0.0, idx);
  CHECK(fit.params.beta == doctest::Approx(ols.beta).epsilon(1e-8));

  double k0 = 0.0;
  Eigen::VectorXd kappa = Eigen::VectorXd::Zero(ds.n_covariates());
  oracle::maximize_q2(ds, w0, 0.0, k0, kappa);
  CHECK(fit.params.kappa0 == doctest::Approx(k0).epsilon(1e-6));
  for (int j = 0; j < kappa.size(); ++j)
    CHECK(fit.params.kappa[j] == doctest::Approx(kappa[j]).epsilon(1e-6));
}

TEST_CASE("em_fit matches brute-force likelihood maximization on a covariate-free instance") {
  auto ds = make_dataset({{"A", 0, 0.3, {}},
                          {"A", 1, 2.1, {}},
                          {"A", 1, 1.7, {}},
                          {"B", 0, -0.4, {}},
                          {"B", 1, 2.9, {}},
                          {"B", 0, 0.8, {}}});
  SensitivityParams sp{0.5, 1.0, 1.0};
  FitResult fit = em_fit(ds, sp, std::nullopt, {1e-10, 5000});
  REQUIRE(fit.converged);

  // nested grid over (beta, sigma, a1, a2, kappa0)
  auto ll_at = [&](double beta, double sigma, double a1, double a2, double k0) {
    ModelParams g;
    g.kappa0 = k0;
    g.kappa = Eigen::VectorXd(0);
    g.psi = Eigen::VectorXd(0);
    g.set_effects = Eigen::VectorXd(2);
    g.set_effects << a1, a2;
    g.sigma = sigma;
    g.beta = beta;
    return observed_loglik(ds, g, sp);
  };
  double b = 0, s = 1, a1 = 0, a2 = 0, k0 = 0;
  double rb = 6, rs = 2.4, ra = 6, rk = 6;
  const int G = 9;
  for (int round = 0; round < 12; ++round) {
    double bb = b, bs = s, b1 = a1, b2 = a2, bk = k0, best = -1e300;
    for (int i0 = 0; i0 < G; ++i0)
      for (int i1 = 0; i1 < G; ++i1)
        for (int i2 = 0; i2 < G; ++i2)
          for (int i3 = 0; i3 < G; ++i3)
            for (int i4 = 0; i4 < G; ++i4) {
              double tb = b - rb + 2 * rb * i0 / (G - 1);
              double ts = std::max(0.05, s - rs + 2 * rs * i1 / (G - 1));
              double t1 = a1 - ra + 2 * ra * i2 / (G - 1);
              double t2 = a2 - ra + 2 * ra * i3 / (G - 1);
              double tk = k0 - rk + 2 * rk * i4 / (G - 1);
              double v = ll_at(tb, ts, t1, t2, tk);
              if (v > best) { best = v; bb = tb; bs = ts; b1 = t1; b2 = t2; bk = tk; }
            }
    b = bb; s = bs; a1 = b1; a2 = b2; k0 = bk;
    rb *= 0.28; rs *= 0.28; ra *= 0.28; rk *= 0.28;
  }
  CHECK(fit.params.beta == doctest::Approx(b).epsilon(1e-3));
}

TEST_CASE("em_fit log-likelihood trace is non-decreasing on random instances") {
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 100 && seed < 200; ++seed) {
    auto ds = test::random_instance(900 + seed, 3 + seed % 4, 2, seed % 3);
    RngStream rng(seed, {8000});
    SensitivityParams sp{0.1 + 0.8 * rng.uniform(), 3.0 * rng.uniform() - 1.0,
                         3.0 * rng.uniform() - 1.0};
    FitResult fit;
    try {
      fit = em_fit(ds, sp);
    } catch (const Error& e) {
      // tiny random instances can genuinely separate; they are not EM runs
      REQUIRE_FALSE(is_input_error(e.code()));
      continue;
    }
    for (std::size_t t = 1; t < fit.loglik_trace.size(); ++t)
      CHECK(fit.loglik_trace[t] >= fit.loglik_trace[t - 1] - 1e-8);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("M-step gradients vanish against central finite differences") {
  auto ds = test::random_instance(95, 3, 1, 1);
  Eigen::VectorXd w1 = test::random_weights(95, ds.n_subjects());
  SensitivityParams sp{0.5, 0.8, 1.2};
  auto idx = outcome_covariate_indices(ds);
  OutcomeMStep of = m_step_outcome(ds, w1, sp, idx);
  TreatmentMStep tf = m_step_treatment(ds, w1, sp);

  const double h = 1e-5;
  // Q1 over (psi, a, beta, sigma)
  {
    auto value = [&](const Eigen::VectorXd& psi, const Eigen::VectorXd& a, double beta,
                     double sigma) { return q1_direct(ds, w1, sp.delta, idx, psi, a, beta, sigma); };
    for (int j = 0; j < of.psi.size(); ++j) {
      Eigen::VectorXd up = of.psi, dn = of.psi;
      up[j] += h;
      dn[j] -= h;
      double g = (value(up, of.set_effects, of.beta, of.sigma) -
                  value(dn, of.set_effects, of.beta, of.sigma)) / (2 * h);
      CHECK(std::fabs(g) < 1e-6);
    }
    for (int s = 0; s < ds.n_sets(); ++s) {
      Eigen::VectorXd up = of.set_effects, dn = of.set_effects;
      up[s] += h;
      dn[s] -= h;
      double g = (value(of.psi, up, of.beta, of.sigma) - value(of.psi, dn, of.beta, of.sigma)) /
                 (2 * h);
      CHECK(std::fabs(g) < 1e-6);
    }
    double gb = (value(of.psi, of.set_effects, of.beta + h, of.sigma) -
                 value(of.psi, of.set_effects, of.beta - h, of.sigma)) / (2 * h);
    CHECK(std::fabs(gb) < 1e-6);
    double gs = (value(of.psi, of.set_effects, of.beta, of.sigma + h) -
                 value(of.psi, of.set_effects, of.beta, of.sigma - h)) / (2 * h);
    CHECK(std::fabs(gs) < 1e-6);
  }
  // Q2 over (kappa0, kappa)
  {
    auto value = [&](double k0, const Eigen::VectorXd& k) {
      return oracle::q2_direct(ds, w1, sp.lambda, k0, k);
    };
    double g0 = (value(tf.kappa0 + h, tf.kappa) - value(tf.kappa0 - h, tf.kappa)) / (2 * h);
    CHECK(std::fabs(g0) < 1e-6);
    for (int j = 0; j < tf.kappa.size(); ++j) {
      Eigen::VectorXd up = tf.kappa, dn = tf.kappa;
      up[j] += h;
      dn[j] -= h;
      double g = (value(tf.kappa0, up) - value(tf.kappa0, dn)) / (2 * h);
      CHECK(std::fabs(g) < 1e-6);
    }
  }
}

TEST_CASE("em_fit is a fixed point at convergence") {
  auto ds = test::random_instance(97, 4, 2, 2);
  SensitivityParams sp{0.5, 1.0, 0.8};
  EmOptions opts;
  FitResult first = em_fit(ds, sp, std::nullopt, opts);
  REQUIRE(first.converged);
  FitResult second = em_fit(ds, sp, first.params, opts);
  CHECK(std::fabs(second.params.beta - first.params.beta) < opts.tol);
}

TEST_CASE("exactly matched covariates are pruned from the outcome model only") {
  auto ds = make_dataset({{"1", 1, 2.0, {5.0, 1.2}},
                          {"1", 0, 1.0, {5.0, 0.4}},
                          {"2", 1, 3.0, {7.0, -0.3}},
                          {"2", 0, 1.5, {7.0, 0.9}}},
                         {"matched", "varying"});
  FitResult fit = em_fit(ds, {0.5, 0.5, 0.5});
  CHECK(fit.pruned_covariates == std::vector<std::string>{"matched"});
  CHECK(fit.params.outcome_cov_idx == std::vector<int>{1});
  CHECK(fit.params.kappa.size() == 2);  // both stay in the propensity model

  SUBCASE("aliased covariates prune too") {
    // second covariate = 2 * first + set-level shift: within-set collinear
    auto ds2 = make_dataset({{"1", 1, 2.0, {1.0, 2.0}},
                             {"1", 0, 1.0, {0.5, 1.0}},
                             {"2", 1, 3.0, {-0.2, 2.6}},
                             {"2", 0, 1.5, {0.8, 4.6}}},
                            {"base", "alias"});
    FitResult fit2 = em_fit(ds2, {0.5, 0.5, 0.5});
    CHECK(fit2.pruned_covariates == std::vector<std::string>{"alias"});
  }
}

TEST_CASE("fit result serializes with named coefficients") {
  auto ds = test::random_instance(99, 3, 1, 2);
  FitResult fit = em_fit(ds, {0.5, 0.4, 0.6});
  auto j = fit_result_to_json(fit, ds);
  CHECK(j["kappa"].size() == 2);
  CHECK(j["set_effects"].size() == 3);
  CHECK(j["converged"].get<bool>() == fit.converged);
  CHECK(j["loglik_trace"].size() == fit.loglik_trace.size());
  CHECK(j.contains("pruned_covariates"));
}
