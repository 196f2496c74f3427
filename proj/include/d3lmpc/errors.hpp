#pragma once

#include <stdexcept>
#include <string>

namespace d3lmpc {

/// Bad caller input: invalid node index, dimension mismatch, out-of-range parameter.
class ArgumentError : public std::invalid_argument {
 public:
  explicit ArgumentError(const std::string& what) : std::invalid_argument(what) {}
};

/// Recorded data cannot support the requested parametrization (PE failure,
/// infeasible local constraint system).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// A convex program has no feasible point (e.g. the system is not d-localizable).
class InfeasibleError : public std::runtime_error {
 public:
  explicit InfeasibleError(const std::string& what) : std::runtime_error(what) {}
};

/// Iterative solver hit its cap before reaching tolerance.
class SolverError : public std::runtime_error {
 public:
  explicit SolverError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace d3lmpc
