#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace kanfd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Error categories map onto the CLI exit codes (1/2/3).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Decimal with 17 significant digits: enough to round-trip any double.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string format_double(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

}  // namespace kanfd
