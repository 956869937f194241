// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace moesim {

enum class ErrorCode {
  InvalidShape,
  DimensionMismatch,
  DuplicateExpertInSelection,
  ExpertIdOutOfRange,
  InvalidSpec,
  LayerOutOfRange,
  BudgetExceedsExperts,
  IoError,
  ParseError,
  SchemaVersionMismatch,
  ProvidedPlacementInvalid,
  InvalidTau,
  EmpiricalTableMissingTau,
  TraceRequiredForSimulatedMode,
  InsufficientMeasurements,
  DegenerateFit,
  InvalidProfile,
  ShapeMismatch,
  TraceExhausted,
  IncompatibleConfigs,
  InvariantViolation,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidShape: return "InvalidShape";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DuplicateExpertInSelection: return "DuplicateExpertInSelection";
    case ErrorCode::ExpertIdOutOfRange: return "ExpertIdOutOfRange";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::LayerOutOfRange: return "LayerOutOfRange";
    case ErrorCode::BudgetExceedsExperts: return "BudgetExceedsExperts";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::ProvidedPlacementInvalid: return "ProvidedPlacementInvalid";
    case ErrorCode::InvalidTau: return "InvalidTau";
    case ErrorCode::EmpiricalTableMissingTau: return "EmpiricalTableMissingTau";
    case ErrorCode::TraceRequiredForSimulatedMode: return "TraceRequiredForSimulatedMode";
    case ErrorCode::InsufficientMeasurements: return "InsufficientMeasurements";
    case ErrorCode::DegenerateFit: return "DegenerateFit";
    case ErrorCode::InvalidProfile: return "InvalidProfile";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TraceExhausted: return "TraceExhausted";
    case ErrorCode::IncompatibleConfigs: return "IncompatibleConfigs";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
  }
  return "Unknown";
}

// Every failure in the library is reported as an Error carrying a code, so
// callers (the CLI in particular) can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  bool is_io() const noexcept { return code_ == ErrorCode::IoError; }

 private:
  ErrorCode code_;
};

}  // namespace moesim
