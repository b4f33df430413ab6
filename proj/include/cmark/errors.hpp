#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cmark {

enum class ErrorCode {
  // validation
  BadParams,
  ShapeMismatch,
  LengthMismatch,
  ConstantVector,
  RankDeficient,
  DegenerateHull,
  NotPrime,
  EqualPrimes,
  ChunkOverflow,
  // unprocessable input
  NoFaceFound,
  EmptyContour,
  EmptyRegion,
  EmptyCorpus,
  WrongKey,
  MalformedCipher,
  VerificationUnavailable,
  NonFiniteLoss,
  // missing artifacts
  MissingCheckpoint,
  MissingFile,
};

std::string_view to_string(ErrorCode code);

/// Process exit code used by the CLI: 2 validation, 3 unprocessable input,
/// 4 missing artifact.
int exit_code_for(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cmark
