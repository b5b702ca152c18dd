#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace defnet {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes (usage 1, data 2, numeric 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or dtypes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters, specs, or configuration files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Misuse of a computation tape (non-scalar loss, second backward, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered, or a degenerate quantity (zero gradient norm).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing on-disk data: dataset files and checkpoints.
class DataError : public Error {
 public:
  enum class Kind {
    kMissingFile,
    kBadMagic,
    kTruncated,
    kVersionMismatch,
    kChecksumMismatch,
    kMalformed,
    kIo,
  };

  DataError(Kind kind, std::string path, std::uint64_t offset,
            const std::string& detail);

  Kind kind() const { return kind_; }
  const std::string& path() const { return path_; }
  std::uint64_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::string path_;
  std::uint64_t offset_;
};

const char* to_string(DataError::Kind kind);

// Evaluation produced no eligible samples, so no rate can be computed.
class EmptyReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace defnet
