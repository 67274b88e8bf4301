#include "hetflow/error.hpp"

namespace hetflow {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::MalformedRow: return "MalformedRow";
    case Errc::NonMonotoneTime: return "NonMonotoneTime";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::TooShort: return "TooShort";
    case Errc::InfeasibleScenario: return "InfeasibleScenario";
    case Errc::BlowUp: return "BlowUp";
    case Errc::DegenerateTrajectory: return "DegenerateTrajectory";
    case Errc::DegenerateRegression: return "DegenerateRegression";
    case Errc::NoValidSegments: return "NoValidSegments";
    case Errc::ZeroMeanAttribute: return "ZeroMeanAttribute";
    case Errc::MissingProfile: return "MissingProfile";
    case Errc::ZeroDensity: return "ZeroDensity";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::InsufficientData: return "InsufficientData";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::EmptyCells: return "EmptyCells";
    case Errc::CflViolation: return "CflViolation";
    case Errc::EmptyInitialCondition: return "EmptyInitialCondition";
    case Errc::StageFailure: return "StageFailure";
    case Errc::EmptySplit: return "EmptySplit";
    case Errc::IoFailure: return "IoFailure";
  }
  return "Unknown";
}

}  // namespace hetflow
