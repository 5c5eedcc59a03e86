#pragma once

#include <stdexcept>
#include <string>

namespace dupguard {

// Stable categories; the CLI prints the name as a machine-readable code.
enum class ErrorCode {
  kInvalidArgument,
  kFormat,
  kIo,
  kNumerical,
  kSchema,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorCode::kInvalidArgument, message);
}

}  // namespace dupguard
