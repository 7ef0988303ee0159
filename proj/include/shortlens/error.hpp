// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace shortlens {

enum class ErrorKind {
  kInvalidInput,
  kInvalidState,
  kNotFound,
  kIntegrity,
  kTrainingDiverged,
  kProvider,
  kValidation,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& what)
      : Error(ErrorKind::kInvalidInput, what) {}
};

class InvalidState : public Error {
 public:
  explicit InvalidState(const std::string& what)
      : Error(ErrorKind::kInvalidState, what) {}
};

class NotFound : public Error {
 public:
  explicit NotFound(const std::string& what)
      : Error(ErrorKind::kNotFound, what) {}
};

// Corrupt or truncated artifact. `offset` is the byte position where
// validation failed.
class IntegrityError : public Error {
 public:
  IntegrityError(const std::string& what, std::uint64_t offset)
      : Error(ErrorKind::kIntegrity,
              what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, int epoch)
      : Error(ErrorKind::kTrainingDiverged,
              what + " (epoch " + std::to_string(epoch) + ")"),
        epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class ProviderError : public Error {
 public:
  explicit ProviderError(const std::string& what)
      : Error(ErrorKind::kProvider, what) {}
};

// Pipeline stage ordering / configuration problems surfaced by the CLI.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ErrorKind::kValidation, what) {}
};

}  // namespace shortlens
