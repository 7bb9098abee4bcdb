#pragma once

#include <stdexcept>
#include <string>

namespace pianolm {

// Machine-readable error codes. The CLI prints the code name on stderr and
// exits nonzero, so scripts can dispatch on it.
enum class ErrorCode {
  OutOfSegment,
  Malformed,
  Truncated,
  Shape,
  Length,
  PitchRange,
  EmptyMask,
  Diverged,
  StageMismatch,
  DecodeOverflow,
  MidiParse,
  MidiUnsupported,
  Config,
  Io,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  const char* code_name() const noexcept { return error_code_name(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace pianolm
