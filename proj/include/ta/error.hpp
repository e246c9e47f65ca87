// Copyright 2026 The ta-workbench Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ta {

// Every failure the library raises carries one of these codes. The service
// layer maps each code to exactly one ApiError (see service.hpp).
enum class ErrorCode {
  // corpus
  IoError,
  ParseError,
  MissingColumn,
  NoUsableRows,
  DuplicateId,
  InvalidId,
  DevSizeOutOfRange,
  PoolTooSmall,
  MissingPoolTag,
  // codebook
  UnknownCode,
  InvalidCodebook,
  InvalidAssignment,
  // promptkit
  ExemplarCountOutOfRange,
  InvalidExemplar,
  EmptyCodeList,
  EmptyRevision,
  QuestionMismatch,
  NoActionsFound,
  MalformedJson,
  // llm
  ContextBudgetExceeded,
  BackendError,
  RateLimitExceeded,
  EmptyInput,
  MockScriptExhausted,
  MockExpectationFailed,
  InvalidConfig,
  // workflow
  PhaseError,
  MaxRoundsReached,
  EmptyRationale,
  NoOpenRound,
  NotConverged,
  SchemaMismatch,
  CorruptSession,
  ExtractionFailed,
  // analysis
  ItemSetMismatch,
  ModeViolation,
  DimensionMismatch,
  ZeroVector,
  InsufficientAssignments,
  InvalidArgument,
  // service
  NotFound,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::NoUsableRows: return "NoUsableRows";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::InvalidId: return "InvalidId";
    case ErrorCode::DevSizeOutOfRange: return "DevSizeOutOfRange";
    case ErrorCode::PoolTooSmall: return "PoolTooSmall";
    case ErrorCode::MissingPoolTag: return "MissingPoolTag";
    case ErrorCode::UnknownCode: return "UnknownCode";
    case ErrorCode::InvalidCodebook: return "InvalidCodebook";
    case ErrorCode::InvalidAssignment: return "InvalidAssignment";
    case ErrorCode::ExemplarCountOutOfRange: return "ExemplarCountOutOfRange";
    case ErrorCode::InvalidExemplar: return "InvalidExemplar";
    case ErrorCode::EmptyCodeList: return "EmptyCodeList";
    case ErrorCode::EmptyRevision: return "EmptyRevision";
    case ErrorCode::QuestionMismatch: return "QuestionMismatch";
    case ErrorCode::NoActionsFound: return "NoActionsFound";
    case ErrorCode::MalformedJson: return "MalformedJson";
    case ErrorCode::ContextBudgetExceeded: return "ContextBudgetExceeded";
    case ErrorCode::BackendError: return "BackendError";
    case ErrorCode::RateLimitExceeded: return "RateLimitExceeded";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::MockScriptExhausted: return "MockScriptExhausted";
    case ErrorCode::MockExpectationFailed: return "MockExpectationFailed";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::PhaseError: return "PhaseError";
    case ErrorCode::MaxRoundsReached: return "MaxRoundsReached";
    case ErrorCode::EmptyRationale: return "EmptyRationale";
    case ErrorCode::NoOpenRound: return "NoOpenRound";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::CorruptSession: return "CorruptSession";
    case ErrorCode::ExtractionFailed: return "ExtractionFailed";
    case ErrorCode::ItemSetMismatch: return "ItemSetMismatch";
    case ErrorCode::ModeViolation: return "ModeViolation";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::InsufficientAssignments: return "InsufficientAssignments";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NotFound: return "NotFound";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  // Message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

// Rate limiter refusal; carries how long the caller would have to wait.
class RateLimitError : public Error {
 public:
  RateLimitError(double wait_seconds, const std::string& message)
      : Error(ErrorCode::RateLimitExceeded, message), wait_seconds_(wait_seconds) {}
  double wait_seconds() const noexcept { return wait_seconds_; }

 private:
  double wait_seconds_;
};

}  // namespace ta
