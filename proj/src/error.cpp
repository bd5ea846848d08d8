#include "desae/error.hpp"

namespace desae {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedRecord: return "E_MALFORMED_RECORD";
    case ErrorCode::EmptyChain: return "E_EMPTY_CHAIN";
    case ErrorCode::LengthMismatch: return "E_LENGTH_MISMATCH";
    case ErrorCode::DuplicatePairId: return "E_DUPLICATE_PAIR_ID";
    case ErrorCode::UnknownSplit: return "E_UNKNOWN_SPLIT";
    case ErrorCode::MissingPlddt: return "E_MISSING_PLDDT";
    case ErrorCode::IoFailure: return "E_IO_FAILURE";
    case ErrorCode::DegenerateGeometry: return "E_DEGENERATE_GEOMETRY";
    case ErrorCode::TooFewPoints: return "E_TOO_FEW_POINTS";
    case ErrorCode::NoEligibleResidues: return "E_NO_ELIGIBLE_RESIDUES";
    case ErrorCode::EmptySampleSet: return "E_EMPTY_SAMPLE_SET";
    case ErrorCode::BinMismatch: return "E_BIN_MISMATCH";
    case ErrorCode::ZeroVector: return "E_ZERO_VECTOR";
    case ErrorCode::ShapeMismatch: return "E_SHAPE_MISMATCH";
    case ErrorCode::NonFiniteValue: return "E_NON_FINITE_VALUE";
    case ErrorCode::DisconnectedGraph: return "E_DISCONNECTED_GRAPH";
    case ErrorCode::NonFiniteLoss: return "E_NON_FINITE_LOSS";
    case ErrorCode::EmptySplit: return "E_EMPTY_SPLIT";
    case ErrorCode::InvalidDistribution: return "E_INVALID_DISTRIBUTION";
    case ErrorCode::ConfigMismatch: return "E_CONFIG_MISMATCH";
    case ErrorCode::InvalidConfig: return "E_INVALID_CONFIG";
  }
  return "E_UNKNOWN";
}

}  // namespace desae
