#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace convoher2 {

enum class ErrorCode {
  // ingest
  NoLabelToken,
  AmbiguousLabel,
  EmptyDataset,
  AlreadySplit,
  DuplicateSample,
  // preprocess
  DecodeError,
  WrongRangeTag,
  EmptySplit,
  // numerics
  ShapeMismatch,
  NonFiniteGradient,
  // model
  InvalidDim,
  DimMismatch,
  MissingWeights,
  ShapeError,
  CorruptCheckpoint,
  TopologyMismatch,
  ConfigurationError,
  // trainer
  NonFiniteLoss,
  MissingFeature,
  // reporting
  LengthMismatch,
  IndexOutOfRange,
  EmptyHistory,
  // config / cli
  UnknownKey,
  TypeError,
  // shared
  IoError,
  PreconditionViolation,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace convoher2
