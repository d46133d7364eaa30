#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace hvl {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Index = Eigen::Index;

/// Per-patch keep flags produced by entropy filtering.
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

// Error taxonomy. Every error thrown by the library derives from hvl::Error so
// callers (the CLI in particular) can map categories to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed manifest or checkpoint header.
struct FormatError : Error {
  using Error::Error;
};

/// Binary payload shorter or longer than the manifest promises.
struct TruncationError : Error {
  using Error::Error;
};

/// Non-finite values, missing classes and similar problems with the data itself.
struct DataError : Error {
  using Error::Error;
};

/// Invalid hyperparameters or synthesis settings.
struct ConfigError : Error {
  using Error::Error;
};

/// Caller broke a precondition (shape mismatch, label out of range, ...).
struct ContractViolation : Error {
  using Error::Error;
};

/// Training diverged (NaN/Inf loss).
struct NumericalError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace hvl
