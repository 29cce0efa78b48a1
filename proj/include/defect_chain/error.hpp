#ifndef DEFECT_CHAIN_ERROR_HPP
#define DEFECT_CHAIN_ERROR_HPP

#include <stdexcept>
#include <string>
#include <vector>

namespace defect_chain {

/// Process exit codes used by the command line driver.
enum class ExitCode : int {
  success = 0,
  validation = 2,
  numerical = 3,
  convergence = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::validation; }
};

/// Invalid argument or configuration value.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Point or fibre outside the region where a quantity is defined.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numerical; }
};

/// Optimizer or estimator failure. Carries the best parameters found so far
/// (may be empty when nothing useful was reached).
class FitError : public NumericalError {
 public:
  FitError(const std::string& what, std::vector<double> best = {})
      : NumericalError(what), best_(std::move(best)) {}
  const std::vector<double>& best_so_far() const noexcept { return best_; }

 private:
  std::vector<double> best_;
};

/// MCMC diagnostic that cannot be computed (e.g. series too short).
class DiagnosticError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace defect_chain

#endif  // DEFECT_CHAIN_ERROR_HPP
