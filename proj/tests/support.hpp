#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "senscal/em.hpp"
#include "senscal/model.hpp"
#include "senscal/rng.hpp"

namespace senscal::test {

// Small dataset builder: one row per subject, covariates in column order.
struct Row {
  std::string set;
  int z;
  double y;
  std::vector<double> x;
};

inline MatchedDataset make_dataset(const std::vector<Row>& rows,
                                   const std::vector<std::string>& cov_names = {},
                                   MatchedDataset::SetValidation validation =
                                       MatchedDataset::SetValidation::full) {
  std::vector<Subject> subjects;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Subject s;
    s.subject_id = std::to_string(i);
    s.set_id = rows[i].set;
    s.z = rows[i].z;
    s.y = rows[i].y;
    s.x = Eigen::Map<const Eigen::VectorXd>(rows[i].x.data(),
                                            static_cast<Eigen::Index>(rows[i].x.size()));
    subjects.push_back(std::move(s));
  }
  std::vector<CovariateMeta> metas;
  for (const auto& name : cov_names) metas.push_back(CovariateMeta{name});
  return MatchedDataset::from_subjects(subjects, metas, validation);
}

// Random full-matched instance for property tests: every set gets at least
// one treated and one control.
inline MatchedDataset random_instance(std::uint64_t seed, int n_sets = 5, int max_extra = 3,
                                      int n_cov = 2) {
  RngStream rng(seed, {7001});
  std::vector<Row> rows;
  std::vector<std::string> names;
  for (int c = 0; c < n_cov; ++c) names.push_back("c" + std::to_string(c));
  for (int s = 0; s < n_sets; ++s) {
    int extra = static_cast<int>(rng.uniform_int(max_extra + 1));
    int size = 2 + extra;
    for (int m = 0; m < size; ++m) {
      Row r;
      r.set = "s" + std::to_string(s);
      r.z = m == 0 ? 1 : (m == 1 ? 0 : (rng.bernoulli(0.5) ? 1 : 0));
      std::vector<double> x(n_cov);
      for (int c = 0; c < n_cov; ++c) x[c] = rng.normal();
      r.x = x;
      double mu = 0.4 * s;
      for (int c = 0; c < n_cov; ++c) mu += 0.3 * (c + 1) * x[c];
      r.y = mu + 1.2 * r.z + 0.8 * rng.normal();
      rows.push_back(std::move(r));
    }
  }
  return make_dataset(rows, names);
}

inline Eigen::VectorXd random_weights(std::uint64_t seed, int n) {
  RngStream rng(seed, {7002});
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = rng.uniform();
  return w;
}

inline MatchedDataset roundtrip_through_csv(const MatchedDataset& ds) {
  std::stringstream buf;
  serialize_dataset(ds, buf);
  return load_dataset(buf);
}

}  // namespace senscal::test
