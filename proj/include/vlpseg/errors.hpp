#pragma once

#include <stdexcept>
#include <string>

namespace vlpseg {

// Error taxonomy, mapped to CLI exit codes in tools/vlpseg.cpp:
//   ConfigError -> 2 (usage), DataError and subclasses -> 3, NumericError -> 4.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct EmptyMaskError : Error {
  explicit EmptyMaskError(const std::string& msg) : Error(msg) {}
};

struct UnknownLabelError : Error {
  explicit UnknownLabelError(const std::string& msg) : Error(msg) {}
};

struct InvalidInputError : Error {
  explicit InvalidInputError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

struct CheckpointError : DataError {
  explicit CheckpointError(const std::string& msg) : DataError(msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

struct NotImplementedError : Error {
  explicit NotImplementedError(const std::string& msg) : Error(msg) {}
};

}  // namespace vlpseg
