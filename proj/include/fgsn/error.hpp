// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>

namespace fgsn {

/// Base of every error raised by the toolkit. The category maps onto the
/// CLI exit codes (config=2, data=3, numerical=4).
class Error : public std::runtime_error {
public:
  enum class Kind { Config, Data, Numerical };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

  int exit_code() const noexcept {
    switch (kind_) {
      case Kind::Config: return 2;
      case Kind::Data: return 3;
      case Kind::Numerical: return 4;
    }
    return 1;
  }

private:
  Kind kind_;
};

class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what) : Error(Kind::Config, what) {}
};

class DataError : public Error {
public:
  explicit DataError(const std::string& what) : Error(Kind::Data, what) {}
};

class NumericalError : public Error {
public:
  explicit NumericalError(const std::string& what) : Error(Kind::Numerical, what) {}
};

}  // namespace fgsn
