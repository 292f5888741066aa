#pragma once

#include <stdexcept>
#include <string>

namespace repfuse {

enum class ErrorKind {
  ShapeMismatch,
  NumericFault,
  Graph,
  Layout,
  BadMagic,
  CountMismatch,
  Truncated,
  Parse,
  InvalidArgument,
  InsufficientData,
  Config,
  Io,
};

const char* error_kind_name(ErrorKind kind);

// Every failure raised by the library carries a category so the CLI can map
// it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + what), kind_(kind), message_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  // The text without the category prefix.
  const std::string& message() const noexcept { return message_; }
  // Same category, with `context` prepended to the message.
  Error with_context(const std::string& context) const { return Error(kind_, context + ": " + message_); }

 private:
  ErrorKind kind_;
  std::string message_;
};

inline const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::NumericFault: return "numeric-fault";
    case ErrorKind::Graph: return "graph-error";
    case ErrorKind::Layout: return "layout-mismatch";
    case ErrorKind::BadMagic: return "bad-magic";
    case ErrorKind::CountMismatch: return "count-mismatch";
    case ErrorKind::Truncated: return "truncated-file";
    case ErrorKind::Parse: return "parse-error";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::InsufficientData: return "insufficient-data";
    case ErrorKind::Config: return "config-error";
    case ErrorKind::Io: return "io-error";
  }
  return "error";
}

}  // namespace repfuse
