#include "senscal/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "senscal/parallel.hpp"
#include "senscal/rng.hpp"

namespace senscal {

namespace {

double expit(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  double e = std::exp(t);
  return e / (1.0 + e);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = seed;
  (void)splitmix64_next(s);
  s ^= a + 0x9e3779b97f4a7c15ULL + (s << 6);
  (void)splitmix64_next(s);
  s ^= b + 0x9e3779b97f4a7c15ULL + (s << 6);
  return splitmix64_next(s);
}

}  // namespace

void ErrorModel::validate() const {
  if (!(param > 0.0)) throw Error(ErrorCode::invalid_config, "error parameter must be positive");
}

void DgpConfig::validate() const {
  if (n_strata < 1 || stratum_size < 1)
    throw Error(ErrorCode::invalid_config, "strata counts must be at least 1");
  if (!(p_true >= 0.0 && p_true <= 1.0))
    throw Error(ErrorCode::invalid_config, "p_true must lie in [0,1]");
  if (!std::isfinite(beta) || !std::isfinite(lambda_true) || !std::isfinite(delta_true))
    throw Error(ErrorCode::invalid_config, "beta, lambda_true, delta_true must be finite");
  if (jitter_half_width < 0.0)
    throw Error(ErrorCode::invalid_config, "jitter half width must be non-negative");
  error.validate();
}

const std::array<double, 7>& covariate_means() {
  static const std::array<double, 7> means = {3.0, 1.0, 5.0, 2.0, 6.0, 4.0, 5.0};
  return means;
}

const std::array<double, 7>& covariate_sds() {
  static const std::array<double, 7> sds = {1.0, 0.15, 1.5, 0.2, 1.0, 0.8, 1.0};
  return sds;
}

double propensity_linear_predictor(const Eigen::VectorXd& x) {
  return -0.03 * x[0] + 0.08 * x[1] + 0.02 * x[2] - 0.9 * x[3] + 0.6 * x[4] - 0.5 * x[5] +
         0.7 * x[6] - 1.5;
}

double linear_response_mean(const Eigen::VectorXd& x) {
  return 0.1 * x[0] - 0.08 * x[1] + 0.04 * x[2] - 0.9 * x[3] + 2.0 * x[4] - 0.5 * x[5] + x[6] -
         5.0;
}

double nonlinear_response_mean(const Eigen::VectorXd& x) {
  return 0.7 * x[0] * x[0] - 0.8 * x[1] * x[1] * x[1] - 0.7 * std::cbrt(std::fabs(x[2])) +
         0.2 * x[4] * x[4] - x[5] + 2.0 * x[6];
}

MatchedDataset simulate_dataset(const DgpConfig& cfg) {
  cfg.validate();
  RngStream rng(cfg.seed, {stream::simulate});
  const auto& means = covariate_means();
  const auto& sds = covariate_sds();
  const int k = 7;

  std::vector<Subject> subjects;
  subjects.reserve(static_cast<std::size_t>(cfg.n_strata) * cfg.stratum_size);
  std::vector<CovariateMeta> metas(k);
  for (int j = 0; j < k; ++j) metas[j].name = "x" + std::to_string(j + 1);

  Eigen::VectorXd stratum_x(k);
  for (int s = 0; s < cfg.n_strata; ++s) {
    for (int j = 0; j < k; ++j) stratum_x[j] = means[j] + sds[j] * rng.normal();
    for (int m = 0; m < cfg.stratum_size; ++m) {
      Subject subj;
      subj.subject_id = "s" + std::to_string(s) + "_" + std::to_string(m);
      subj.set_id = "s" + std::to_string(s);
      subj.x = stratum_x;
      if (cfg.jitter_half_width > 0.0)
        for (int j = 0; j < k; ++j)
          subj.x[j] += (2.0 * rng.uniform() - 1.0) * cfg.jitter_half_width;

      double u = rng.bernoulli(cfg.p_true) ? 1.0 : 0.0;
      double pz = expit(propensity_linear_predictor(subj.x) + cfg.lambda_true * u);
      subj.z = rng.bernoulli(pz) ? 1 : 0;

      double mean = cfg.response == ResponseModel::linear ? linear_response_mean(subj.x)
                                                          : nonlinear_response_mean(subj.x);
      mean += cfg.beta * subj.z + cfg.delta_true * u;
      double eps = 0.0;
      switch (cfg.error.kind) {
        case ErrorModel::Kind::normal: eps = cfg.error.param * rng.normal(); break;
        case ErrorModel::Kind::student_t: eps = rng.student_t(cfg.error.param); break;
        case ErrorModel::Kind::laplace: eps = rng.laplace(cfg.error.param); break;
      }
      subj.y = mean + eps;
      subjects.push_back(std::move(subj));
    }
  }
  return MatchedDataset::from_subjects(subjects, metas, MatchedDataset::SetValidation::pre_matching);
}

namespace {

Eigen::VectorXd propensity_scores(const MatchedDataset& ds) {
  Eigen::VectorXd zero_w = Eigen::VectorXd::Zero(ds.n_subjects());
  TreatmentMStep fit = m_step_treatment(ds, zero_w, SensitivityParams{0.5, 0.0, 0.0});
  Eigen::VectorXd scores(ds.n_subjects());
  for (int i = 0; i < ds.n_subjects(); ++i)
    scores[i] = expit(fit.kappa0 + fit.kappa.dot(ds.x().row(i)));
  return scores;
}

bool set_has_both_arms(const MatchedDataset& ds, const std::vector<int>& members) {
  bool treated = false, control = false;
  for (int i : members) (ds.z()[i] == 1 ? treated : control) = true;
  return treated && control;
}

}  // namespace

MatchedDataset full_match(const MatchedDataset& ds, bool keep_strata) {
  const int n = ds.n_subjects();
  int n_treated = 0;
  for (int i = 0; i < n; ++i) n_treated += ds.z()[i];
  if (n_treated == 0) throw Error(ErrorCode::no_treated, "dataset has no treated subjects");
  if (n_treated == n) throw Error(ErrorCode::no_control, "dataset has no control subjects");

  if (keep_strata) {
    std::vector<std::vector<int>> groups;
    std::vector<std::string> ids;
    std::vector<int> degenerate;  // strata lacking an arm or with one member
    for (int s = 0; s < ds.n_sets(); ++s) {
      const auto& members = ds.set_members()[s];
      if (members.size() >= 2 && set_has_both_arms(ds, members)) {
        groups.push_back(members);
        ids.push_back(ds.set_ids()[s]);
      } else {
        degenerate.push_back(s);
      }
    }
    if (groups.empty())
      throw Error(ErrorCode::no_treated, "no stratum contains both a treated and a control");
    if (!degenerate.empty()) {
      Eigen::VectorXd scores = propensity_scores(ds);
      std::vector<double> group_score(groups.size());
      for (std::size_t g = 0; g < groups.size(); ++g) {
        double mean = 0.0;
        for (int i : groups[g]) mean += scores[i];
        group_score[g] = mean / static_cast<double>(groups[g].size());
      }
      for (int s : degenerate) {
        double mean = 0.0;
        for (int i : ds.set_members()[s]) mean += scores[i];
        mean /= static_cast<double>(ds.set_members()[s].size());
        std::size_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t g = 0; g < groups.size(); ++g) {
          double dist = std::fabs(group_score[g] - mean);
          if (dist < best_dist) {
            best_dist = dist;
            best = g;
          }
        }
        for (int i : ds.set_members()[s]) groups[best].push_back(i);
      }
    }
    return ds.regroup(groups, ids);
  }

  Eigen::VectorXd scores = propensity_scores(ds);
  std::vector<int> treated, controls;
  for (int i = 0; i < n; ++i) (ds.z()[i] == 1 ? treated : controls).push_back(i);

  // Nearest pool member by score. Exact score ties (exactly matched
  // covariates) break toward the least-loaded subject, so tied groups
  // subdivide into small balanced sets instead of piling onto one seed.
  std::vector<int> load(n, 0);
  auto nearest = [&](double score, const std::vector<int>& pool) {
    int best = pool[0];
    double best_dist = std::fabs(scores[pool[0]] - score);
    for (int i : pool) {
      double dist = std::fabs(scores[i] - score);
      if (dist < best_dist || (dist == best_dist && load[i] < load[best])) {
        best_dist = dist;
        best = i;
      }
    }
    return best;
  };

  // Controls attach to their nearest treated subject; treated subjects that
  // attracted no control fall back to joining their nearest control's set.
  std::vector<std::vector<int>> by_treated(treated.size());
  std::vector<int> owner_of_control(n, -1);
  std::vector<int> treated_pos(n, -1);
  for (std::size_t t = 0; t < treated.size(); ++t) treated_pos[treated[t]] = static_cast<int>(t);
  for (int c : controls) {
    int t = nearest(scores[c], treated);
    by_treated[treated_pos[t]].push_back(c);
    owner_of_control[c] = treated_pos[t];
    ++load[t];
  }
  std::fill(load.begin(), load.end(), 0);
  for (std::size_t t = 0; t < treated.size(); ++t) {
    if (!by_treated[t].empty()) continue;
    int c = nearest(scores[treated[t]], controls);
    by_treated[owner_of_control[c]].push_back(treated[t]);
    ++load[c];
  }

  std::vector<std::vector<int>> groups;
  std::vector<std::string> ids;
  for (std::size_t t = 0; t < treated.size(); ++t) {
    if (by_treated[t].empty()) continue;
    std::vector<int> members = by_treated[t];
    members.push_back(treated[t]);
    std::sort(members.begin(), members.end());
    ids.push_back("m" + std::to_string(groups.size()));
    groups.push_back(std::move(members));
  }
  return ds.regroup(groups, ids);
}

StudyReport run_study(const DgpConfig& cfg, const std::vector<SensitivityParams>& params_grid,
                      const StudyConfig& study) {
  cfg.validate();
  if (study.n_reps < 1) throw Error(ErrorCode::invalid_config, "n_reps must be at least 1");
  for (const auto& sp : params_grid) sp.validate();

  const SensitivityParams truth{cfg.p_true, cfg.lambda_true, cfg.delta_true};
  const int n_points = static_cast<int>(params_grid.size());

  struct RepResult {
    bool truth_ok = false;
    bool covered = false;
    double beta_hat = 0.0;
    std::vector<char> point_ok;
    std::vector<char> rejected;
  };
  std::vector<RepResult> reps(study.n_reps);

  parallel_for(study.jobs, study.n_reps, [&](int r) {
    RepResult& res = reps[r];
    res.point_ok.assign(n_points, 0);
    res.rejected.assign(n_points, 0);

    DgpConfig rep_cfg = cfg;
    rep_cfg.seed = derive_seed(cfg.seed, stream::study_rep, static_cast<std::uint64_t>(r));
    MatchedDataset matched =
        standardize(full_match(simulate_dataset(rep_cfg), cfg.jitter_half_width == 0.0));

    BootstrapConfig boot;
    boot.n_boot = study.n_boot;
    boot.level = study.level;
    boot.jobs = 1;
    boot.em = study.em;

    boot.seed = derive_seed(rep_cfg.seed, stream::bootstrap, 0);
    try {
      IntervalEstimate est = block_bootstrap_ci(matched, truth, boot);
      res.truth_ok = true;
      res.covered = est.ci_low <= cfg.beta && cfg.beta <= est.ci_high;
      res.beta_hat = est.beta_hat;
    } catch (const Error&) {
    }

    for (int g = 0; g < n_points; ++g) {
      boot.seed = derive_seed(rep_cfg.seed, stream::bootstrap, static_cast<std::uint64_t>(g) + 1);
      try {
        IntervalEstimate est = block_bootstrap_ci(matched, params_grid[g], boot);
        res.point_ok[g] = 1;
        res.rejected[g] = is_significant(est) ? 1 : 0;
      } catch (const Error&) {
      }
    }
  });

  StudyReport report;
  report.n_reps = study.n_reps;
  int truth_n = 0, covered = 0;
  double beta_sum = 0.0, beta_sq = 0.0;
  for (const auto& res : reps) {
    if (!res.truth_ok) continue;
    ++truth_n;
    covered += res.covered ? 1 : 0;
    beta_sum += res.beta_hat;
    beta_sq += res.beta_hat * res.beta_hat;
  }
  report.n_failed_truth = study.n_reps - truth_n;
  if (truth_n > 0) {
    report.coverage = static_cast<double>(covered) / truth_n;
    report.mean_beta_hat = beta_sum / truth_n;
    if (truth_n > 1) {
      double var = (beta_sq - beta_sum * beta_sum / truth_n) / (truth_n - 1);
      report.mc_se = std::sqrt(std::max(var, 0.0) / truth_n);
    }
  }
  for (int g = 0; g < n_points; ++g) {
    StudyReport::PowerCell cell;
    cell.sp = params_grid[g];
    int ok = 0, rej = 0;
    for (const auto& res : reps) {
      if (!res.point_ok[g]) continue;
      ++ok;
      rej += res.rejected[g];
    }
    cell.n_failed = study.n_reps - ok;
    cell.power = ok > 0 ? static_cast<double>(rej) / ok : 0.0;
    report.power_by_params.push_back(cell);
  }
  return report;
}

nlohmann::ordered_json study_report_to_json(const StudyReport& report) {
  nlohmann::ordered_json j;
  j["n_reps"] = report.n_reps;
  j["coverage"] = report.coverage;
  j["mean_beta_hat"] = report.mean_beta_hat;
  j["mc_se"] = report.mc_se;
  j["n_failed_truth"] = report.n_failed_truth;
  nlohmann::ordered_json power = nlohmann::ordered_json::array();
  for (const auto& cell : report.power_by_params) {
    nlohmann::ordered_json row;
    row["p"] = cell.sp.p;
    row["lambda"] = cell.sp.lambda;
    row["delta"] = cell.sp.delta;
    row["power"] = cell.power;
    row["n_failed"] = cell.n_failed;
    power.push_back(std::move(row));
  }
  j["power_by_params"] = std::move(power);
  return j;
}

void write_power_csv(const StudyReport& report, std::ostream& out) {
  out << "lambda,delta,power,n_failed\n";
  for (const auto& cell : report.power_by_params)
    out << format_double(cell.sp.lambda) << ',' << format_double(cell.sp.delta) << ','
        << format_double(cell.power) << ',' << cell.n_failed << '\n';
}

namespace {

std::vector<SensitivityParams> diagonal_grid(std::initializer_list<double> values, double p) {
  std::vector<SensitivityParams> grid;
  for (double v : values) grid.push_back({p, v, v});
  return grid;
}

std::vector<Preset> make_presets() {
  std::vector<Preset> presets;
  auto base = [] {
    DgpConfig cfg;
    cfg.n_strata = 100;
    cfg.stratum_size = 10;
    cfg.response = ResponseModel::linear;
    cfg.error = {ErrorModel::Kind::normal, 1.5};
    cfg.beta = 2.0;
    cfg.p_true = 0.5;
    return cfg;
  };
  const auto grid_large = {0.0, 1.0, 1.5, 2.0, 2.5, 3.0};
  const auto grid_small = {0.0, 0.5, 0.8, 1.0, 1.5, 2.0};

  Preset linear_s1{"linear-s1", base(), diagonal_grid(grid_large, 0.5)};
  presets.push_back(linear_s1);

  Preset linear_s2{"linear-s2", base(), diagonal_grid(grid_large, 0.5)};
  linear_s2.cfg.n_strata = 200;
  linear_s2.cfg.stratum_size = 20;
  presets.push_back(linear_s2);

  Preset nonlinear{"nonlinear", base(), diagonal_grid(grid_large, 0.5)};
  nonlinear.cfg.response = ResponseModel::nonlinear;
  presets.push_back(nonlinear);

  Preset linear_small{"linear-small", base(), diagonal_grid(grid_small, 0.5)};
  linear_small.cfg.beta = 1.0;
  presets.push_back(linear_small);

  Preset nonlinear_small{"nonlinear-small", base(), diagonal_grid(grid_small, 0.5)};
  nonlinear_small.cfg.beta = 1.0;
  nonlinear_small.cfg.response = ResponseModel::nonlinear;
  presets.push_back(nonlinear_small);

  Preset t2{"t2", base(), diagonal_grid(grid_small, 0.5)};
  t2.cfg.beta = 1.0;
  t2.cfg.error = {ErrorModel::Kind::student_t, 2.0};
  presets.push_back(t2);

  Preset laplace{"laplace", base(), diagonal_grid(grid_small, 0.5)};
  laplace.cfg.beta = 1.0;
  laplace.cfg.error = {ErrorModel::Kind::laplace, 1.5};
  presets.push_back(laplace);

  for (auto [suffix, width] : {std::pair{"02", 0.2}, {"05", 0.5}, {"10", 1.0}}) {
    Preset jitter{"jitter-" + std::string(suffix), base(), diagonal_grid(grid_small, 0.5)};
    jitter.cfg.beta = 1.0;
    jitter.cfg.jitter_half_width = width;
    presets.push_back(jitter);
  }
  return presets;
}

}  // namespace

const std::vector<Preset>& study_presets() {
  static const std::vector<Preset> presets = make_presets();
  return presets;
}

const Preset* find_preset(const std::string& name) {
  for (const auto& p : study_presets())
    if (p.name == name) return &p;
  return nullptr;
}

}  // namespace senscal
