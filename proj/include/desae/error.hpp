#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace desae {

enum class ErrorCode {
  MalformedRecord,
  EmptyChain,
  LengthMismatch,
  DuplicatePairId,
  UnknownSplit,
  MissingPlddt,
  IoFailure,
  DegenerateGeometry,
  TooFewPoints,
  NoEligibleResidues,
  EmptySampleSet,
  BinMismatch,
  ZeroVector,
  ShapeMismatch,
  NonFiniteValue,
  DisconnectedGraph,
  NonFiniteLoss,
  EmptySplit,
  InvalidDistribution,
  ConfigMismatch,
  InvalidConfig,
};

/// Stable machine-readable name, e.g. "E_EMPTY_SPLIT".
std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace desae
