#include "senscal/errors.hpp"

namespace senscal {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::missing_column: return "MissingColumn";
    case ErrorCode::non_binary_treatment: return "NonBinaryTreatment";
    case ErrorCode::singleton_set: return "SingletonSet";
    case ErrorCode::set_without_both_arms: return "SetWithoutBothArms";
    case ErrorCode::non_finite_value: return "NonFiniteValue";
    case ErrorCode::zero_variance: return "ZeroVariance";
    case ErrorCode::invalid_format: return "InvalidFormat";
    case ErrorCode::invalid_config: return "InvalidConfig";
    case ErrorCode::too_many_variables: return "TooManyVariables";
    case ErrorCode::no_treated: return "NoTreated";
    case ErrorCode::no_control: return "NoControl";
    case ErrorCode::rank_deficient: return "RankDeficient";
    case ErrorCode::separation: return "Separation";
    case ErrorCode::singular_information: return "SingularInformation";
    case ErrorCode::not_converged: return "NotConverged";
    case ErrorCode::too_many_failures: return "TooManyFailures";
  }
  return "Unknown";
}

bool is_input_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::missing_column:
    case ErrorCode::non_binary_treatment:
    case ErrorCode::singleton_set:
    case ErrorCode::set_without_both_arms:
    case ErrorCode::non_finite_value:
    case ErrorCode::zero_variance:
    case ErrorCode::invalid_format:
    case ErrorCode::invalid_config:
    case ErrorCode::too_many_variables:
    case ErrorCode::no_treated:
    case ErrorCode::no_control:
      return true;
    default:
      return false;
  }
}

}  // namespace senscal
