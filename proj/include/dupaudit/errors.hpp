#pragma once

#include <stdexcept>
#include <string>

namespace dupaudit {

// Process exit codes used by the CLI.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kBackend = 2,
  kIntegrity = 3,
};

// Root of every error the library throws. Each subclass maps to one exit code.
class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Bad arguments: unknown format tag, dimension mismatch, out-of-range tau...
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ExitCode::kUsage, what) {}
};

// Input that is structurally valid but has nothing to work on.
class EmptyInputError : public Error {
 public:
  explicit EmptyInputError(const std::string& what)
      : Error(ExitCode::kUsage, "empty input: " + what) {}
};

// Zero vectors, empty denominators, empty corpora.
class DegenerateInputError : public Error {
 public:
  explicit DegenerateInputError(const std::string& what)
      : Error(ExitCode::kUsage, "degenerate input: " + what) {}
};

// Operation not available in the current mode (e.g. detection on an
// embeddings-only probe).
class ModeError : public Error {
 public:
  explicit ModeError(const std::string& what) : Error(ExitCode::kUsage, what) {}
};

class BackendError : public Error {
 public:
  explicit BackendError(const std::string& what)
      : Error(ExitCode::kBackend, "backend error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what)
      : Error(ExitCode::kIntegrity, "io error: " + what) {}
};

// Persisted artifact is corrupt or inconsistent with its companions.
class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what)
      : Error(ExitCode::kIntegrity, "integrity error: " + what) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(ExitCode::kIntegrity,
              "format error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& what)
      : Error(ExitCode::kIntegrity, "invariant violated: " + what) {}
};

}  // namespace dupaudit
