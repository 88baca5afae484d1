#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace smds {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Bad or inconsistent configuration / input (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical failure during filtering, smoothing or optimization (exit code 3).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File system / parsing failure (exit code 4).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace smds
