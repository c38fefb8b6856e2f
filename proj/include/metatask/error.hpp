#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace metatask {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input bytes are not valid UTF-8.
class DecodeError : public Error {
 public:
  DecodeError(std::size_t offset, const std::string& what)
      : Error("decode error at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class EmptyCorpusError : public Error {
 public:
  EmptyCorpusError() : Error("corpus contains no sentences") {}
};

/// Invalid synthetic corpus specification.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Two artifacts that must describe the same corpus do not.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Malformed file; carries the 1-based line number when known (0 otherwise).
class FormatError : public Error {
 public:
  FormatError(std::size_t line, const std::string& what)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// No token of a sentence has a vector in the embedding table.
class CoverageError : public Error {
 public:
  using Error::Error;
};

/// A sampler could not draw what was asked (too few words, sentences, clusters).
class ExhaustionError : public Error {
 public:
  using Error::Error;
};

/// Raised after the bounded retry budget of an episode sampler is spent.
class DistributionExhaustedError : public ExhaustionError {
 public:
  using ExhaustionError::ExhaustionError;
};

/// Configuration problems. Lists every violation found, not just the first.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}
  explicit ConfigError(const std::string& violation) : ConfigError(std::vector<std::string>{violation}) {}
  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid configuration";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

/// Non-finite loss or gradient during training.
class DivergenceError : public Error {
 public:
  DivergenceError(long step, const std::string& what)
      : Error("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace metatask
