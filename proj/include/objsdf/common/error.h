#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace objsdf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a computation produces NaN or Inf. `where` names the
/// location kind ("node", "layer", "ray") and `index` its id.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string where, std::int64_t index, const std::string& detail)
      : Error("non-finite value at " + where + " " + std::to_string(index) +
              (detail.empty() ? std::string() : ": " + detail)),
        where_(std::move(where)),
        index_(index) {}

  const std::string& where() const { return where_; }
  std::int64_t index() const { return index_; }

 private:
  std::string where_;
  std::int64_t index_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace objsdf
