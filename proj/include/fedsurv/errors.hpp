#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fedsurv {

enum class ErrorKind {
  InvalidInput,
  InvalidHazard,
  DegenerateFit,
  SingularDesign,
  NonConvergence,
  InvalidFoldCount,
  CoarseRatioFailure,
  PositivityViolation,
  EmptyTarget,
  EmptySite,
  WrongBundleMode,
  EmptyTable,
  NumericalError,
  BootstrapDegenerate,
  SiteUnavailable,
  ProtocolError,
  IngestionError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::InvalidHazard: return "InvalidHazard";
    case ErrorKind::DegenerateFit: return "DegenerateFit";
    case ErrorKind::SingularDesign: return "SingularDesign";
    case ErrorKind::NonConvergence: return "NonConvergence";
    case ErrorKind::InvalidFoldCount: return "InvalidFoldCount";
    case ErrorKind::CoarseRatioFailure: return "CoarseRatioFailure";
    case ErrorKind::PositivityViolation: return "PositivityViolation";
    case ErrorKind::EmptyTarget: return "EmptyTarget";
    case ErrorKind::EmptySite: return "EmptySite";
    case ErrorKind::WrongBundleMode: return "WrongBundleMode";
    case ErrorKind::EmptyTable: return "EmptyTable";
    case ErrorKind::NumericalError: return "NumericalError";
    case ErrorKind::BootstrapDegenerate: return "BootstrapDegenerate";
    case ErrorKind::SiteUnavailable: return "SiteUnavailable";
    case ErrorKind::ProtocolError: return "ProtocolError";
    case ErrorKind::IngestionError: return "IngestionError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), message_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// The description without the kind prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

/// Newton-type solver gave up; carries the last iterate for diagnostics.
class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string& what, std::vector<double> last_iterate, double grad_norm)
      : Error(ErrorKind::NonConvergence, what),
        last_iterate_(std::move(last_iterate)),
        grad_norm_(grad_norm) {}

  const std::vector<double>& last_iterate() const noexcept { return last_iterate_; }
  double grad_norm() const noexcept { return grad_norm_; }

 private:
  std::vector<double> last_iterate_;
  double grad_norm_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace fedsurv
