#pragma once

#include <stdexcept>
#include <string>

namespace vitmerge {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct SingularError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct TrainingError : Error {
  using Error::Error;
};

struct MergeError : Error {
  using Error::Error;
};

struct GateError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace vitmerge
