#pragma once

#include <stdexcept>
#include <string>

namespace ofa {

enum class ErrorCode {
  invalid_argument,
  dimension_mismatch,
  non_finite,
  bad_magic,
  truncated,
  unsupported_version,
  io,
  config,
  divergence,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::dimension_mismatch: return "dimension mismatch";
    case ErrorCode::non_finite: return "non-finite value";
    case ErrorCode::bad_magic: return "bad magic";
    case ErrorCode::truncated: return "truncated payload";
    case ErrorCode::unsupported_version: return "unsupported version";
    case ErrorCode::io: return "i/o failure";
    case ErrorCode::config: return "config error";
    case ErrorCode::divergence: return "divergence";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ofa
