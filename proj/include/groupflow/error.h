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

#ifndef GROUPFLOW_ERROR_H_
#define GROUPFLOW_ERROR_H_

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace groupflow {

// Every failure raised by the library carries one of these codes. The names
// follow the error vocabulary of the module that raises them.
enum class ErrorCode {
  // grammar
  kUnbalancedBracket,
  kEmptyToken,
  kIllegalCharacter,
  kEmptyCorpus,
  // numerics
  kShapeMismatch,
  kUnsupportedKernel,
  kNotInTrace,
  kNonScalarOutput,
  kNonFiniteValue,
  // encoder
  kInvalidConfig,
  kLengthMismatch,
  kPoolingDegenerate,
  kNoLabels,
  kUnsupported,
  // explain
  kTraceGradMismatch,
  kUnknownMethod,
  kDegenerateMask,
  // data
  kUnknownFragment,
  kIo,
  kMalformedRecord,
  kInvariantViolation,
  // editor
  kInsufficientSeeds,
  kEmptyMolecule,
  // cli
  kMalformedJson,
  kUnknownKey,
  kInvalidValue,
};

std::string_view ErrorCodeName(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Raised by the tokenizer; `offset` is the byte offset of the first violation.
class ParseError : public Error {
 public:
  ParseError(ErrorCode code, std::size_t offset);

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Raised by line-oriented loaders; `line` is 1-based.
class RecordError : public Error {
 public:
  RecordError(ErrorCode code, std::size_t line, const std::string& reason);

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Raised by configuration handling; `key` is the offending dotted key or path.
class ConfigError : public Error {
 public:
  ConfigError(ErrorCode code, std::string key, const std::string& reason);

  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

}  // namespace groupflow

#endif  // GROUPFLOW_ERROR_H_
