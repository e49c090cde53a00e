#include "convoher2/error.hpp"

namespace convoher2 {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NoLabelToken: return "NoLabelToken";
    case ErrorCode::AmbiguousLabel: return "AmbiguousLabel";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::AlreadySplit: return "AlreadySplit";
    case ErrorCode::DuplicateSample: return "DuplicateSample";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::WrongRangeTag: return "WrongRangeTag";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::InvalidDim: return "InvalidDim";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::MissingWeights: return "MissingWeights";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::TopologyMismatch: return "TopologyMismatch";
    case ErrorCode::ConfigurationError: return "ConfigurationError";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::MissingFeature: return "MissingFeature";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::EmptyHistory: return "EmptyHistory";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::TypeError: return "TypeError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::PreconditionViolation: return "PreconditionViolation";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

}  // namespace convoher2
