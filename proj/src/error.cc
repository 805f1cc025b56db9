/*
 * Copyright 2026 The groupflow Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "groupflow/error.h"

#include <utility>

namespace groupflow {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnbalancedBracket: return "UnbalancedBracket";
    case ErrorCode::kEmptyToken: return "EmptyToken";
    case ErrorCode::kIllegalCharacter: return "IllegalCharacter";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kUnsupportedKernel: return "UnsupportedKernel";
    case ErrorCode::kNotInTrace: return "NotInTrace";
    case ErrorCode::kNonScalarOutput: return "NonScalarOutput";
    case ErrorCode::kNonFiniteValue: return "NonFiniteValue";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kPoolingDegenerate: return "PoolingDegenerate";
    case ErrorCode::kNoLabels: return "NoLabels";
    case ErrorCode::kUnsupported: return "Unsupported";
    case ErrorCode::kTraceGradMismatch: return "TraceGradMismatch";
    case ErrorCode::kUnknownMethod: return "UnknownMethod";
    case ErrorCode::kDegenerateMask: return "DegenerateMask";
    case ErrorCode::kUnknownFragment: return "UnknownFragment";
    case ErrorCode::kIo: return "Io";
    case ErrorCode::kMalformedRecord: return "MalformedRecord";
    case ErrorCode::kInvariantViolation: return "InvariantViolation";
    case ErrorCode::kInsufficientSeeds: return "InsufficientSeeds";
    case ErrorCode::kEmptyMolecule: return "EmptyMolecule";
    case ErrorCode::kMalformedJson: return "MalformedJson";
    case ErrorCode::kUnknownKey: return "UnknownKey";
    case ErrorCode::kInvalidValue: return "InvalidValue";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + message),
      code_(code) {}

ParseError::ParseError(ErrorCode code, std::size_t offset)
    : Error(code, "at byte offset " + std::to_string(offset)),
      offset_(offset) {}

RecordError::RecordError(ErrorCode code, std::size_t line,
                         const std::string& reason)
    : Error(code, "line " + std::to_string(line) + ": " + reason),
      line_(line) {}

ConfigError::ConfigError(ErrorCode code, std::string key,
                         const std::string& reason)
    : Error(code, key + ": " + reason), key_(std::move(key)) {}

}  // namespace groupflow
