#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hetflow {

/// Failure categories raised across the toolkit.
enum class Errc {
  InvalidArgument,
  MalformedRow,
  NonMonotoneTime,
  EmptyDataset,
  TooShort,
  InfeasibleScenario,
  BlowUp,
  DegenerateTrajectory,
  DegenerateRegression,
  NoValidSegments,
  ZeroMeanAttribute,
  MissingProfile,
  ZeroDensity,
  DimensionMismatch,
  NonFiniteLoss,
  InsufficientData,
  TooFewSamples,
  EmptyCells,
  CflViolation,
  EmptyInitialCondition,
  StageFailure,
  EmptySplit,
  IoFailure,
};

std::string_view to_string(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace hetflow
