// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nofe {

/// Bad inputs: out-of-range parameters, inconsistent shapes, malformed files.
/// Mapped to exit code 1 by the CLI.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values encountered during computation. Exit code 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Structural problems in dataset / checkpoint files. The kind distinguishes
/// a wrong version field, a blob whose length does not match the manifest,
/// shapes that disagree with the declared dimensions, and tensors appearing
/// out of the required order.
class DataFormatError : public ValidationError {
 public:
  enum class Kind { VersionMismatch, TruncatedBlob, ShapeMismatch, LayoutMismatch };

  DataFormatError(Kind kind, const std::string& what)
      : ValidationError(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace nofe
