#pragma once

#include <stdexcept>
#include <string>

namespace latte {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A zero-norm (or non-finite) embedding reached a similarity computation.
class DegenerateEmbedding : public Error {
 public:
  explicit DegenerateEmbedding(const std::string& where)
      : Error("degenerate embedding: " + where) {}
};

/// Invalid configuration or mismatched dimensions.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("configuration error: " + what) {}
};

/// An encoder or caption backend could not be constructed.
class BackendUnavailable : public Error {
 public:
  explicit BackendUnavailable(const std::string& what) : Error("backend unavailable: " + what) {}
};

/// Caption generation failed after all retries.
class GenerationFailed : public Error {
 public:
  explicit GenerationFailed(const std::string& what) : Error("generation failed: " + what) {}
};

/// A persisted artifact has an unexpected format_version or shape.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

/// A pipeline artifact required by the current stage does not exist.
class MissingArtifact : public Error {
 public:
  MissingArtifact(const std::string& artifact, const std::string& producer)
      : Error("missing " + artifact + "; run `" + producer + "` first") {}
};

/// Non-finite numbers appeared where finite values are required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

}  // namespace latte
