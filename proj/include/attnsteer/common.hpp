#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace attnsteer {

// Model tensors are float32 row-major; extraction numerics run in float64.
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;
using RowVectorF = Eigen::RowVectorXf;
using MatrixD = Eigen::MatrixXd;
using VectorD = Eigen::VectorXd;

using TokenId = std::int32_t;

enum class ErrorKind {
  InvalidArgument,
  IoError,
  ConfigError,
  ConfigMismatch,
  // corpus
  UnknownToken,
  OddDatasetSize,
  EmptyPrefix,
  VocabTooSmall,
  // model
  ContextOverflow,
  NonFiniteActivation,
  ShapeMismatch,
  DivergedTraining,
  // guidance
  PositionInsidePrefix,
  EmptyCandidateSet,
  UnpairedDataset,
  MissingTrace,
  // extraction
  DegenerateDirection,
  UnbalancedClasses,
  SingularSystem,
  SoftLabelsUnsupported,
  NegativeQuadraticForm,
  IllConditionedKernel,
  NonConvergedEigenvector,
  NonFiniteGradient,
  ConstantLabels,
  ZeroRow,
  // enrichment
  EligibleSetTooSmall,
  PrefixOutsideEligible,
  KOutOfRange,
  // judge
  EmptyResponse,
  NetworkError,
  MalformedVerdict,
  AuthError,
  MissingQuestion,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace attnsteer
