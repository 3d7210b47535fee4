#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dfd {

enum class ErrorKind {
  InvalidArgument,
  InvalidInput,
  Format,
  Corruption,
  EndOfTrace,
  TraceDivergence,
  Calibration,
  UndefinedMetric,
  Numerical,
  Config,
  Io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::Format: return "format";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::EndOfTrace: return "end-of-trace";
    case ErrorKind::TraceDivergence: return "trace-divergence";
    case ErrorKind::Calibration: return "calibration";
    case ErrorKind::UndefinedMetric: return "undefined-metric";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

/// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& message) {
  if (!cond) throw Error(kind, message);
}

using TokenId = std::uint32_t;

}  // namespace dfd
