#pragma once

#include <stdexcept>
#include <string>

namespace storm {

enum class ErrorKind {
  Dimension,
  Numeric,
  Config,
  Vocabulary,
  SequenceLength,
  File,
};

const char* to_string(ErrorKind kind);

// All library failures surface as storm::Error; `kind()` tells callers
// (notably the CLI exit-code mapping) which contract was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Config: return "configuration";
    case ErrorKind::Vocabulary: return "vocabulary";
    case ErrorKind::SequenceLength: return "sequence-length";
    case ErrorKind::File: return "file";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace storm
