#include "attnsteer/common.hpp"

namespace attnsteer {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::UnknownToken: return "UnknownToken";
    case ErrorKind::OddDatasetSize: return "OddDatasetSize";
    case ErrorKind::EmptyPrefix: return "EmptyPrefix";
    case ErrorKind::VocabTooSmall: return "VocabTooSmall";
    case ErrorKind::ContextOverflow: return "ContextOverflow";
    case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DivergedTraining: return "DivergedTraining";
    case ErrorKind::PositionInsidePrefix: return "PositionInsidePrefix";
    case ErrorKind::EmptyCandidateSet: return "EmptyCandidateSet";
    case ErrorKind::UnpairedDataset: return "UnpairedDataset";
    case ErrorKind::MissingTrace: return "MissingTrace";
    case ErrorKind::DegenerateDirection: return "DegenerateDirection";
    case ErrorKind::UnbalancedClasses: return "UnbalancedClasses";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::SoftLabelsUnsupported: return "SoftLabelsUnsupported";
    case ErrorKind::NegativeQuadraticForm: return "NegativeQuadraticForm";
    case ErrorKind::IllConditionedKernel: return "IllConditionedKernel";
    case ErrorKind::NonConvergedEigenvector: return "NonConvergedEigenvector";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::ConstantLabels: return "ConstantLabels";
    case ErrorKind::ZeroRow: return "ZeroRow";
    case ErrorKind::EligibleSetTooSmall: return "EligibleSetTooSmall";
    case ErrorKind::PrefixOutsideEligible: return "PrefixOutsideEligible";
    case ErrorKind::KOutOfRange: return "KOutOfRange";
    case ErrorKind::EmptyResponse: return "EmptyResponse";
    case ErrorKind::NetworkError: return "NetworkError";
    case ErrorKind::MalformedVerdict: return "MalformedVerdict";
    case ErrorKind::AuthError: return "AuthError";
    case ErrorKind::MissingQuestion: return "MissingQuestion";
  }
  return "Unknown";
}

}  // namespace attnsteer
