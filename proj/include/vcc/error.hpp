#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vcc {

enum class ErrorKind {
  invalid_input,
  index,
  ordering,
  unsupported_layer,
  invalid_target,
  undefined_metric,
  invalid_k,
  zero_margin,
  insufficient_randoms,
  no_path,
  insufficient_data,
  invalid_concept,
  training_failure,
  numeric,
  io,
  config,
  bridge,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_input: return "invalid-input";
    case ErrorKind::index: return "index";
    case ErrorKind::ordering: return "ordering";
    case ErrorKind::unsupported_layer: return "unsupported-layer";
    case ErrorKind::invalid_target: return "invalid-target";
    case ErrorKind::undefined_metric: return "undefined-metric";
    case ErrorKind::invalid_k: return "invalid-k";
    case ErrorKind::zero_margin: return "zero-margin";
    case ErrorKind::insufficient_randoms: return "insufficient-randoms";
    case ErrorKind::no_path: return "no-path";
    case ErrorKind::insufficient_data: return "insufficient-data";
    case ErrorKind::invalid_concept: return "invalid-concept";
    case ErrorKind::training_failure: return "training-failure";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
    case ErrorKind::bridge: return "bridge";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the kinds above so the
/// CLI can map it to an exit code and a machine-readable record.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace vcc
