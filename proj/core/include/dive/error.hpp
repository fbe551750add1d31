#pragma once

#include <stdexcept>
#include <string>

namespace dive {

enum class ErrorCode {
  kShapeMismatch,
  kInvalidArgument,
  kNonFinite,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kIo,
  kConfig,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dive
