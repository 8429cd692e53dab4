#pragma once

#include <stdexcept>
#include <string>

namespace flg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};
struct InvalidInputError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};

}  // namespace flg
