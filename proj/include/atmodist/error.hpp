#pragma once

#include <stdexcept>
#include <string>

namespace atmodist {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid dimensions, shapes or hyper-parameters in a config.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("configuration error: " + what) {}
};

/// Malformed or inconsistent files on disk.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

/// Arguments that do not match the expected shape.
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("input error: " + what) {}
};

/// Data that cannot be normalized (zero variance, all-zero profiles).
class DegenerateDataError : public Error {
 public:
  explicit DegenerateDataError(const std::string& what) : Error("degenerate data: " + what) {}
};

/// Non-finite loss or gradient during optimisation.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error("training diverged: " + what) {}
};

/// A distance profile is missing samples for some lags.
class IncompleteProfileError : public Error {
 public:
  explicit IncompleteProfileError(const std::string& what)
      : Error("incomplete profile: " + what) {}
};

/// Failure of one pipeline stage; carries the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace atmodist
