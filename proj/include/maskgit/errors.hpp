#pragma once

#include <stdexcept>
#include <string>

namespace maskgit {

// All library failures derive from Error; `code()` is a stable short tag the
// CLI prints in its machine-parseable error line.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message) : Error("shape", message) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message)
      : Error("numeric", message) {}
};

class TapeError : public Error {
 public:
  explicit TapeError(const std::string& message) : Error("tape", message) {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& message)
      : Error("invalid_argument", message) {}
};

class CheckpointError : public Error {
 public:
  CheckpointError(std::string code, const std::string& message)
      : Error(std::move(code), message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message)
      : Error("config", message) {}
};

}  // namespace maskgit
