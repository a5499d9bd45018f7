#pragma once

#include <stdexcept>
#include <string>

namespace senscal {

enum class ErrorCode {
  missing_column,
  non_binary_treatment,
  singleton_set,
  set_without_both_arms,
  non_finite_value,
  zero_variance,
  invalid_format,
  invalid_config,
  too_many_variables,
  no_treated,
  no_control,
  rank_deficient,
  separation,
  singular_information,
  not_converged,
  too_many_failures,
};

const char* error_code_name(ErrorCode code);

// Input/validation errors map to CLI exit 2, numerical failures to exit 3.
bool is_input_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + msg),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace senscal
