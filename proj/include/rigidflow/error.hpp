#pragma once

#include <stdexcept>
#include <string>

namespace rigidflow {

enum class ErrorKind {
  InvalidInput,
  Config,
  Dataset,
  DegenerateRotation,
  DegenerateConfiguration,
  NumericOverflow,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid input";
    case ErrorKind::Config: return "configuration error";
    case ErrorKind::Dataset: return "dataset error";
    case ErrorKind::DegenerateRotation: return "degenerate rotation";
    case ErrorKind::DegenerateConfiguration: return "degenerate configuration";
    case ErrorKind::NumericOverflow: return "numeric overflow";
    case ErrorKind::Io: return "i/o error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Process exit codes used by the command-line tool.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NumericOverflow:
    case ErrorKind::DegenerateRotation:
    case ErrorKind::DegenerateConfiguration:
      return 2;
    case ErrorKind::Io:
      return 3;
    default:
      return 1;
  }
}

}  // namespace rigidflow
