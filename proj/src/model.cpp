#include "senscal/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace senscal {

void SensitivityParams::validate() const {
  if (!(p >= 0.0 && p <= 1.0))
    throw Error(ErrorCode::invalid_config, "p must lie in [0,1], got " + format_double(p));
  if (!std::isfinite(lambda) || !std::isfinite(delta))
    throw Error(ErrorCode::invalid_config, "lambda and delta must be finite");
}

double coef_to_original_scale(double standardized_coef, const CovariateMeta& meta) {
  return standardized_coef * (0.5 / meta.orig_sd);
}

double coef_to_standardized_scale(double original_coef, const CovariateMeta& meta) {
  return original_coef * (meta.orig_sd / 0.5);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

MatchedDataset MatchedDataset::from_subjects(const std::vector<Subject>& subjects,
                                             std::vector<CovariateMeta> covariates,
                                             SetValidation validation, FlagPolicy flags) {
  MatchedDataset ds;
  const int n = static_cast<int>(subjects.size());
  const int k = static_cast<int>(covariates.size());
  if (n == 0) throw Error(ErrorCode::invalid_format, "dataset has no subjects");

  ds.covariates_ = std::move(covariates);
  ds.x_.resize(n, k);
  ds.y_.resize(n);
  ds.z_.resize(n);
  ds.set_index_.resize(n);
  ds.subject_ids_.reserve(n);

  std::map<std::string, int> set_lookup;
  for (int i = 0; i < n; ++i) {
    const Subject& s = subjects[i];
    if (s.z != 0 && s.z != 1)
      throw Error(ErrorCode::non_binary_treatment,
                  "subject " + s.subject_id + " has treatment " + std::to_string(s.z));
    if (!std::isfinite(s.y))
      throw Error(ErrorCode::non_finite_value, "outcome of subject " + s.subject_id);
    if (s.x.size() != k)
      throw Error(ErrorCode::invalid_format,
                  "subject " + s.subject_id + " has " + std::to_string(s.x.size()) +
                      " covariates, expected " + std::to_string(k));
    for (int j = 0; j < k; ++j) {
      if (!std::isfinite(s.x[j]))
        throw Error(ErrorCode::non_finite_value, "covariate " + ds.covariates_[j].name +
                                                     " of subject " + s.subject_id);
    }
    ds.x_.row(i) = s.x;
    ds.y_[i] = s.y;
    ds.z_[i] = s.z;
    ds.subject_ids_.push_back(s.subject_id);

    auto it = set_lookup.find(s.set_id);
    int si;
    if (it == set_lookup.end()) {
      si = static_cast<int>(ds.set_ids_.size());
      set_lookup.emplace(s.set_id, si);
      ds.set_ids_.push_back(s.set_id);
      ds.set_members_.emplace_back();
    } else {
      si = it->second;
    }
    ds.set_index_[i] = si;
    ds.set_members_[si].push_back(i);
  }

  // Binary flags: exactly the two values {0,1} unless the caller fixed them.
  for (int j = 0; j < k; ++j) {
    CovariateMeta& meta = ds.covariates_[j];
    bool only01 = true, saw0 = false, saw1 = false;
    for (int i = 0; i < n; ++i) {
      double v = ds.x_(i, j);
      if (v == 0.0) saw0 = true;
      else if (v == 1.0) saw1 = true;
      else { only01 = false; break; }
    }
    if (meta.binary && !only01)
      throw Error(ErrorCode::invalid_config,
                  "covariate " + meta.name + " is flagged binary but takes values outside {0,1}");
    if (!meta.binary && flags == FlagPolicy::detect) meta.binary = only01 && saw0 && saw1;
  }

  if (validation == SetValidation::full) {
    for (int si = 0; si < ds.n_sets(); ++si) {
      const auto& members = ds.set_members_[si];
      if (members.size() < 2)
        throw Error(ErrorCode::singleton_set, "set " + ds.set_ids_[si] + " has a single member");
      bool treated = false, control = false;
      for (int i : members) (ds.z_[i] == 1 ? treated : control) = true;
      if (!treated || !control)
        throw Error(ErrorCode::set_without_both_arms,
                    "set " + ds.set_ids_[si] + " lacks a " + (treated ? "control" : "treated") +
                        " subject");
    }
  }
  return ds;
}

std::vector<std::string> MatchedDataset::covariate_names() const {
  std::vector<std::string> names;
  names.reserve(covariates_.size());
  for (const auto& c : covariates_) names.push_back(c.name);
  return names;
}

Subject MatchedDataset::subject(int i) const {
  Subject s;
  s.subject_id = subject_ids_[i];
  s.set_id = set_ids_[set_index_[i]];
  s.x = x_.row(i);
  s.z = z_[i];
  s.y = y_[i];
  return s;
}

MatchedDataset MatchedDataset::resample_sets(const std::vector<int>& set_indices) const {
  MatchedDataset ds;
  ds.covariates_ = covariates_;

  int n = 0;
  for (int si : set_indices) n += static_cast<int>(set_members_[si].size());
  ds.x_.resize(n, x_.cols());
  ds.y_.resize(n);
  ds.z_.resize(n);
  ds.set_index_.resize(n);
  ds.subject_ids_.reserve(n);
  ds.set_ids_.reserve(set_indices.size());
  ds.set_members_.reserve(set_indices.size());

  int row = 0;
  for (std::size_t b = 0; b < set_indices.size(); ++b) {
    ds.set_ids_.push_back("b" + std::to_string(b));
    std::vector<int> members;
    for (int i : set_members_[set_indices[b]]) {
      ds.x_.row(row) = x_.row(i);
      ds.y_[row] = y_[i];
      ds.z_[row] = z_[i];
      ds.set_index_[row] = static_cast<int>(b);
      ds.subject_ids_.push_back(subject_ids_[i]);
      members.push_back(row);
      ++row;
    }
    ds.set_members_.push_back(std::move(members));
  }
  return ds;
}

MatchedDataset MatchedDataset::regroup(const std::vector<std::vector<int>>& groups,
                                       const std::vector<std::string>& group_ids,
                                       SetValidation validation) const {
  std::vector<Subject> subjects;
  subjects.reserve(n_subjects());
  std::vector<std::string> assignment(n_subjects());
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (int i : groups[g]) assignment[i] = group_ids[g];
  for (int i = 0; i < n_subjects(); ++i) {
    Subject s = subject(i);
    s.set_id = assignment[i];
    subjects.push_back(std::move(s));
  }
  return from_subjects(subjects, covariates_, validation, FlagPolicy::keep);
}

double MatchedDataset::outcome_sd() const {
  const int n = n_subjects();
  if (n < 2) return 0.0;
  double mean = y_.mean();
  return std::sqrt((y_.array() - mean).square().sum() / (n - 1));
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  fields.push_back(field);
  return fields;
}

double parse_number(const std::string& token, int line_no, const std::string& column) {
  double v;
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc() || res.ptr != end || !std::isfinite(v))
    throw Error(ErrorCode::non_finite_value,
                "row " + std::to_string(line_no) + ", column " + column + ": '" + token +
                    "' is not a finite number");
  return v;
}

}  // namespace

MatchedDataset load_dataset(std::istream& in, const Schema& schema) {
  std::string line;
  if (!std::getline(in, line))
    throw Error(ErrorCode::invalid_format, "empty input: missing header row");
  std::vector<std::string> header = split_csv_line(line);

  int outcome_col = -1, treatment_col = -1, set_col = -1;
  std::vector<int> covariate_cols;
  std::vector<CovariateMeta> covariates;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    const std::string& name = header[c];
    if (name == schema.outcome) outcome_col = c;
    else if (name == schema.treatment) treatment_col = c;
    else if (name == schema.set) set_col = c;
    else {
      covariate_cols.push_back(c);
      covariates.push_back(CovariateMeta{name});
    }
  }
  if (outcome_col < 0)
    throw Error(ErrorCode::missing_column, "outcome column '" + schema.outcome + "'");
  if (treatment_col < 0)
    throw Error(ErrorCode::missing_column, "treatment column '" + schema.treatment + "'");
  if (set_col < 0)
    throw Error(ErrorCode::missing_column, "set column '" + schema.set + "'");

  for (const std::string& name : schema.force_binary) {
    auto it = std::find_if(covariates.begin(), covariates.end(),
                           [&](const CovariateMeta& m) { return m.name == name; });
    if (it == covariates.end())
      throw Error(ErrorCode::missing_column, "force_binary column '" + name + "'");
    it->binary = true;
  }
  for (const std::string& name : schema.force_continuous) {
    auto it = std::find_if(covariates.begin(), covariates.end(),
                           [&](const CovariateMeta& m) { return m.name == name; });
    if (it == covariates.end())
      throw Error(ErrorCode::missing_column, "force_continuous column '" + name + "'");
  }

  std::vector<Subject> subjects;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw Error(ErrorCode::invalid_format,
                  "row " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                      " fields, expected " + std::to_string(header.size()));
    Subject s;
    s.subject_id = std::to_string(line_no);
    s.set_id = fields[set_col];
    s.y = parse_number(fields[outcome_col], line_no, schema.outcome);
    double zval = parse_number(fields[treatment_col], line_no, schema.treatment);
    if (zval != 0.0 && zval != 1.0)
      throw Error(ErrorCode::non_binary_treatment,
                  "row " + std::to_string(line_no) + ", column " + schema.treatment + ": '" +
                      fields[treatment_col] + "'");
    s.z = static_cast<int>(zval);
    s.x.resize(covariate_cols.size());
    for (std::size_t j = 0; j < covariate_cols.size(); ++j)
      s.x[j] = parse_number(fields[covariate_cols[j]], line_no, covariates[j].name);
    subjects.push_back(std::move(s));
  }

  MatchedDataset ds = MatchedDataset::from_subjects(subjects, covariates);

  // force_continuous narrows auto-detection back down.
  if (!schema.force_continuous.empty()) {
    std::vector<CovariateMeta> metas = ds.covariates();
    bool changed = false;
    for (auto& m : metas) {
      bool forced = std::find(schema.force_continuous.begin(), schema.force_continuous.end(),
                              m.name) != schema.force_continuous.end();
      if (forced && m.binary) {
        m.binary = false;
        changed = true;
      }
    }
    if (changed)
      ds = MatchedDataset::from_subjects(subjects, metas, MatchedDataset::SetValidation::full,
                                         MatchedDataset::FlagPolicy::keep);
  }
  return ds;
}

MatchedDataset load_dataset_file(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::invalid_format, "cannot open '" + path + "'");
  return load_dataset(in, schema);
}

void serialize_dataset(const MatchedDataset& ds, std::ostream& out, const Schema& schema) {
  out << schema.set << ',' << schema.treatment << ',' << schema.outcome;
  for (const auto& c : ds.covariates()) out << ',' << c.name;
  out << '\n';
  for (int i = 0; i < ds.n_subjects(); ++i) {
    out << ds.set_ids()[ds.set_index()[i]] << ',' << ds.z()[i] << ',' << format_double(ds.y()[i]);
    for (int j = 0; j < ds.n_covariates(); ++j) out << ',' << format_double(ds.x()(i, j));
    out << '\n';
  }
}

MatchedDataset standardize(const MatchedDataset& ds) {
  const int n = ds.n_subjects();
  std::vector<Subject> rows;
  rows.reserve(n);
  for (int i = 0; i < n; ++i) rows.push_back(ds.subject(i));
  std::vector<CovariateMeta> metas = ds.covariates();

  for (int j = 0; j < ds.n_covariates(); ++j) {
    CovariateMeta& meta = metas[j];
    if (meta.binary) continue;
    Eigen::VectorXd col = ds.x().col(j);
    double mean = col.mean();
    double sd = n > 1 ? std::sqrt((col.array() - mean).square().sum() / (n - 1)) : 0.0;
    if (sd < 1e-12 * std::max(1.0, std::fabs(mean)))
      throw Error(ErrorCode::zero_variance, "covariate " + meta.name + " is constant");
    double scale = 0.5 / sd;
    for (int i = 0; i < n; ++i) rows[i].x[j] = (rows[i].x[j] - mean) * scale;
    // Compose with any earlier standardization so meta always maps back to
    // the covariate's original scale.
    meta.orig_mean = meta.orig_mean + 2.0 * meta.orig_sd * mean;
    meta.orig_sd = 2.0 * meta.orig_sd * sd;
    meta.standardized = true;
  }
  return MatchedDataset::from_subjects(rows, metas, MatchedDataset::SetValidation::pre_matching,
                                       MatchedDataset::FlagPolicy::keep);
}

}  // namespace senscal
