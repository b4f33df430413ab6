#include "cmark/errors.hpp"

namespace cmark {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadParams: return "BadParams";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ConstantVector: return "ConstantVector";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::DegenerateHull: return "DegenerateHull";
    case ErrorCode::NotPrime: return "NotPrime";
    case ErrorCode::EqualPrimes: return "EqualPrimes";
    case ErrorCode::ChunkOverflow: return "ChunkOverflow";
    case ErrorCode::NoFaceFound: return "NoFaceFound";
    case ErrorCode::EmptyContour: return "EmptyContour";
    case ErrorCode::EmptyRegion: return "EmptyRegion";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::WrongKey: return "WrongKey";
    case ErrorCode::MalformedCipher: return "MalformedCipher";
    case ErrorCode::VerificationUnavailable: return "VerificationUnavailable";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::MissingFile: return "MissingFile";
  }
  return "Unknown";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadParams:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::LengthMismatch:
    case ErrorCode::ConstantVector:
    case ErrorCode::RankDeficient:
    case ErrorCode::DegenerateHull:
    case ErrorCode::NotPrime:
    case ErrorCode::EqualPrimes:
    case ErrorCode::ChunkOverflow:
      return 2;
    case ErrorCode::MissingCheckpoint:
    case ErrorCode::MissingFile:
      return 4;
    default:
      return 3;
  }
}

}  // namespace cmark
