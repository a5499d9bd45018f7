#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "support.hpp"

using namespace senscal;
using test::Row;
using test::make_dataset;

namespace {

MatchedDataset load_from_string(const std::string& csv, const Schema& schema = {}) {
  std::istringstream in(csv);
  return load_dataset(in, schema);
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  throw std::runtime_error("expected a senscal::Error");
}

}  // namespace

TEST_CASE("smallest valid full match loads") {
  auto ds = load_from_string(
      "set,z,y,age\n"
      "1,1,2.5,30\n"
      "1,0,1.5,40\n"
      "2,1,3.5,50\n"
      "2,0,2.0,20\n");
  CHECK(ds.n_subjects() == 4);
  CHECK(ds.n_sets() == 2);
  CHECK(ds.covariate_names() == std::vector<std::string>{"age"});
  CHECK(ds.z().sum() == 2);
}

TEST_CASE("load errors name the offending column or row") {
  CHECK(code_of([] { load_from_string("set,z,w\n1,1,2\n1,0,1\n"); }) ==
        ErrorCode::missing_column);
  CHECK(code_of([] {
          load_from_string("set,z,y\n7,0,1\n7,0,2\n");
        }) == ErrorCode::set_without_both_arms);
  CHECK(code_of([] {
          load_from_string("set,z,y\n1,1,2\n1,0,1\n9,1,3\n");
        }) == ErrorCode::singleton_set);
  CHECK(code_of([] {
          load_from_string("set,z,y\n1,2,2\n1,0,1\n");
        }) == ErrorCode::non_binary_treatment);
  CHECK(code_of([] {
          load_from_string("set,z,y\n1,1,nan\n1,0,1\n");
        }) == ErrorCode::non_finite_value);
  CHECK(code_of([] {
          load_from_string("set,z,y,a\n1,1,2,x\n1,0,1,3\n");
        }) == ErrorCode::non_finite_value);

  try {
    load_from_string("set,z,y\n7,0,1\n7,0,2\n7,1,1\n8,0,1\n8,0,2\n");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("8") != std::string::npos);
  }
}

TEST_CASE("binary detection follows the {0,1} rule and schema overrides") {
  auto ds = load_from_string(
      "set,z,y,flag,level,coded\n"
      "1,1,2,0,1.2,1\n"
      "1,0,1,1,3.4,2\n"
      "2,1,3,1,0.7,1\n"
      "2,0,2,0,2.2,2\n");
  CHECK(ds.covariates()[0].binary);        // {0,1}
  CHECK_FALSE(ds.covariates()[1].binary);  // continuous values
  CHECK_FALSE(ds.covariates()[2].binary);  // {1,2}-coded stays continuous

  Schema forced;
  forced.force_continuous = {"flag"};
  auto ds2 = load_from_string(
      "set,z,y,flag\n"
      "1,1,2,0\n"
      "1,0,1,1\n",
      forced);
  CHECK_FALSE(ds2.covariates()[0].binary);
}

TEST_CASE("custom column roles") {
  Schema schema;
  schema.outcome = "lead";
  schema.treatment = "exposed";
  schema.set = "match_id";
  auto ds = load_from_string(
      "match_id,exposed,lead,age\n"
      "a,1,2.5,30\n"
      "a,0,1.5,40\n",
      schema);
  CHECK(ds.n_subjects() == 2);
}

TEST_CASE("standardize rescales continuous covariates to mean 0 sd 0.5") {
  // column with sample mean 3, sample sd exactly 1
  auto ds = make_dataset({{"1", 1, 1.0, {2.0, 1.0}},
                          {"1", 0, 2.0, {2.0, 0.0}},
                          {"2", 1, 3.0, {3.0, 1.0}},
                          {"2", 0, 4.0, {4.0, 0.0}},
                          {"2", 0, 2.5, {4.0, 1.0}}},
                         {"cont", "bin"});
  REQUIRE(ds.covariates()[1].binary);
  auto std_ds = standardize(ds);

  Eigen::VectorXd col = std_ds.x().col(0);
  CHECK(col.mean() == doctest::Approx(0.0).epsilon(1e-12));
  double sd = std::sqrt((col.array() - col.mean()).square().sum() / (ds.n_subjects() - 1));
  CHECK(sd == doctest::Approx(0.5).epsilon(1e-12));
  for (int i = 0; i < 5; ++i)
    CHECK(col[i] == doctest::Approx((ds.x()(i, 0) - 3.0) * 0.5).epsilon(1e-12));
  CHECK(std_ds.covariates()[0].orig_mean == doctest::Approx(3.0));
  CHECK(std_ds.covariates()[0].orig_sd == doctest::Approx(1.0));

  // binary column intact
  CHECK(std_ds.x().col(1) == ds.x().col(1));

  SUBCASE("idempotence") {
    auto twice = standardize(std_ds);
    CHECK((twice.x() - std_ds.x()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(twice.covariates()[0].orig_mean == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(twice.covariates()[0].orig_sd == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("standardize rejects constant continuous covariates") {
  auto ds = make_dataset({{"1", 1, 1.0, {2.0}}, {"1", 0, 2.0, {2.0}}}, {"c"});
  CHECK(code_of([&] { standardize(ds); }) == ErrorCode::zero_variance);
}

TEST_CASE("coefficient scale round trip") {
  CovariateMeta meta;
  meta.orig_mean = 7.0;
  meta.orig_sd = 2.3;
  for (double b : {0.0, 1.0, -4.2, 0.37}) {
    CHECK(coef_to_standardized_scale(coef_to_original_scale(b, meta), meta) ==
          doctest::Approx(b).epsilon(1e-12));
    CHECK(coef_to_original_scale(coef_to_standardized_scale(b, meta), meta) ==
          doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("serialize then load is the identity") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto ds = test::random_instance(seed, 4, 2, 3);
    auto back = test::roundtrip_through_csv(ds);
    REQUIRE(back.n_subjects() == ds.n_subjects());
    REQUIRE(back.n_sets() == ds.n_sets());
    CHECK((back.x() - ds.x()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.y() - ds.y()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(back.z() == ds.z());
    CHECK(back.set_index() == ds.set_index());
    CHECK(back.covariate_names() == ds.covariate_names());
    for (int c = 0; c < ds.n_covariates(); ++c)
      CHECK(back.covariates()[c].binary == ds.covariates()[c].binary);
  }
}

TEST_CASE("sensitivity params validate") {
  CHECK_THROWS_AS((SensitivityParams{1.2, 0, 0}).validate(), Error);
  CHECK_THROWS_AS((SensitivityParams{0.5, std::nan(""), 0}).validate(), Error);
  CHECK_NOTHROW((SensitivityParams{0.0, -2.0, 3.0}).validate());
}

TEST_CASE("resample_sets keeps blocks intact with fresh ids") {
  auto ds = test::random_instance(4, 5, 2, 2);
  auto res = ds.resample_sets({2, 2, 0});
  CHECK(res.n_sets() == 3);
  CHECK(res.set_ids() == std::vector<std::string>{"b0", "b1", "b2"});
  CHECK(res.set_members()[0].size() == ds.set_members()[2].size());
  CHECK(res.set_members()[1].size() == ds.set_members()[2].size());
  int i0 = res.set_members()[0][0];
  CHECK(res.y()[i0] == ds.y()[ds.set_members()[2][0]]);
}
